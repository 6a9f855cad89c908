from .network import (ForwardOutputs, HCNNFP, NetworkConfig, build_network, infer, total_loss,
                      training_objective)
from .training import DESK_LR, Dataset, TrainConfig, TrainResult, desk_preset, load_dataset, train

__all__ = [
    "DESK_LR", "Dataset", "ForwardOutputs", "HCNNFP", "NetworkConfig", "TrainConfig", "TrainResult",
    "build_network", "desk_preset", "infer", "load_dataset", "total_loss", "train", "training_objective",
]
