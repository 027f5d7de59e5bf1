"""Post-training INT8 quantization toolkit for a small compute-graph IR."""

from .tensor import DType, QuantParams, Tensor, compute_scale, dequantize, quantize, requantize, requantization_range
from .graph import Graph, GraphBuilder, Node, OpKind, op_census, topo_order, validate
from .executor import Executor, execute

__version__ = "0.1.0"
