"""corelower: lower neural-network graphs onto a five-operator accelerator
core set and recover accuracy with label-free blockwise distillation."""

__version__ = "0.1.0"

from .ir import (  # noqa: F401
    Graph, GraphBuilder, Node, Tensor, TensorSpec, WeightStore,
    infer_shapes, is_core, non_core_nodes, validate,
)
from .legalize import LegalizeConfig, PassTrace, legalize  # noqa: F401
from .profiles import ChipProfile, check_profile, count_macs, load_profile  # noqa: F401
from .quant import BitWidthConfig, attach_fakequant  # noqa: F401
from .serialize import load_graph, save_graph  # noqa: F401
