"""Small, fast experiment configs shared by the end-to-end tests."""
from fedexdnn.client import TrainConfig
from fedexdnn.config import DataSection, EncoderSection, ExperimentConfig
from fedexdnn.fedserver import FedCCConfig


def tiny_config(**overrides) -> ExperimentConfig:
    base = dict(
        clients=2, rounds=2, aggregator="fedavg_ex", num_exemplars=4, modes_per_client=1,
        seed=3,
        encoder=EncoderSection(num_layers=1, hidden_dim=4, embed_dim=4),
        train=TrainConfig(batch_size=16, local_epochs=1),
        fedcc=FedCCConfig(steps=20),
        data=DataSection(modes=2, channels=2, seg_len=8, n_per_mode=12, n_per_mode_eval=6,
                         eval_anomaly_fraction=0.25),
    )
    base.update(overrides)
    return ExperimentConfig(**base)


def tiny_dict(**overrides) -> dict:
    return tiny_config(**overrides).to_dict()
