"""Parameter-efficient tuning of a small numpy Transformer for ranking."""

from .iaa import IaaConfig, budget_split, discrepancy_probe, wire_iaa
from .pet import PetConfig, count_params, install_pet
from .ranking import BiEncoder, CrossEncoder, evaluate, listwise_loss
from .training import TrainConfig, train
from .transformer import Encoder, EncoderConfig

__all__ = [
    "BiEncoder", "CrossEncoder", "Encoder", "EncoderConfig", "IaaConfig", "PetConfig", "TrainConfig",
    "budget_split", "count_params", "discrepancy_probe", "evaluate", "install_pet", "listwise_loss", "train",
    "wire_iaa",
]
__version__ = "0.1.0"
