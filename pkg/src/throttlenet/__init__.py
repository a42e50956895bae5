"""Runtime-throttleable neural networks with gated components."""
from .architectures import ARCHITECTURES, ArchConfig, ThrottleableNetwork, build_network
from .data import BatchStream, Dataset, load_cifar_binary, load_idx, synth_dataset
from .estimator import ThrottleableClassifier
from .evaluation import CurveRecord, SweepSpec, auc, evaluate_at, flop_count, sweep, utilization_profile
from .gating import (
    GatedModule,
    GateVector,
    PenaltySpec,
    complexity_penalty,
    gated_forward,
    network_utilization,
    normalize_gate,
    reference_forward,
    utilization,
)
from .strategies import (
    ControllerParams,
    depthwise_nested_gate,
    independent_gate,
    nested_gate,
    nested_k,
    static_plan,
)
from .tensor import Tensor, backward, finite_diff_check
from .training import TrainConfig, combined_loss, cosine_lr, train_controller, train_datapath

__version__ = "0.1.0"
