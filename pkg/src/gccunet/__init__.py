"""Graph capsule convolution U-Net for retinal vessel segmentation, in NumPy."""

__version__ = "0.1.0"

from .tensor import ConfigurationError, ContractError, Parameter, ShapeError, Tensor, backward, no_grad
from .gradcheck import CheckReport, grad_check
from .graph import EMPTY_GRAPH, Graph, GraphConvLayer, build_channel_graph, build_spatial_vessel_graph, graph_conv, normalize_adjacency
from .capsule import CapsuleTensor, GraphCapsuleConv, RoutingState, capsules_to_feature, dynamic_routing, squash, to_primary_capsules
from .fusion import BGA, CGA, MSGF, SGA, SGAF, sign_split
from .network import GCCUNet, ModelConfig, build_model, load_model, param_count, save_weights, load_weights
from .data import FundusSample, extract_patches, generate_synthetic, load_drive_layout, load_mask, save_mask
from .metrics import MetricsReport, auroc, cal_metrics, metrics_report
from .training import TrainConfig, cross_entropy, evaluate, train
from .estimator import VesselSegmenter
