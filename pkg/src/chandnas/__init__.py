"""Differentiable search of per-layer channel counts for CNNs.

A seed network gets one trainable binary mask per channel group.  Training
minimizes ``task + lam*|S - s*| + mu*O`` where ``S`` is the effective
parameter count and ``O`` the multiply-accumulate count, so the search lands
near a size budget ``s*`` while ``mu`` trades accuracy for fewer OPs.
"""

from .cost import CostReport, LayerCost, exact_counts, ops_cost, size_cost
from .data import Dataset, load_dataset
from .loss import LossBreakdown, composite_loss, compute_lambda
from .masks import ChannelMask
from .model import Model, build_seed, materialize, shrunk_spec
from .pareto import ParetoPoint, SweepPlan, export_architecture, report, run_sweep
from .search import RunResult, SearchConfig, finetune, run_search, warmup
from .spec import LayerSpec, NetworkSpec, SpecError, load_network_spec

__version__ = "0.1.0"
