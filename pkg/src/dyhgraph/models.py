"""Node classifiers over unrolled event graphs, plus their training loop.

Six variants share one contract: ``forward(training)`` returns a logit row
per node, the loss reads only target replicas from the training split, and
early stopping tracks validation average precision.  The homogeneous and
typed baselines (gcn, gat, simple-hgn) run over the union of structural and
temporal edges; the dyhgn family alternates a structural pass with a
temporal pass per layer block, optionally over feature tables extended with
aggregated diachronic edge messages (dyhgn-de) and a typed attention pass
in front (dyhgn-de-hgt).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.special import expit, softmax
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import tensor as t
from .data import Split, chronological_split
from .diachronic import DiachronicConfig, DiachronicParams, build_x_de
from .errors import ConfigurationError, DivergenceError, ValidationError
from .graph import (
    LabelSet,
    UnrolledGraph,
    build_unrolled_graph,
    directed_edges,
    normalized_adjacency,
)
from .layers import (
    GATConv,
    GCNConv,
    HGTConv,
    LayerNorm,
    Linear,
    MLPHead,
    SimpleHGNConv,
)
from .metrics import average_precision, roc_auc
from .tensor import AdamW, Tape, Tensor, backward
from .validation import check_option, check_positive_int, check_unit_interval

VARIANTS = ("gcn", "gat", "simple-hgn", "dyhgn", "dyhgn-de", "dyhgn-de-hgt")
BASELINE_VARIANTS = ("gcn", "gat", "simple-hgn")
DE_VARIANTS = ("dyhgn-de", "dyhgn-de-hgt")

# Label-schema families.  massreg targets carry a binary flag plus a risk
# level and train a dual head; the xfraud kinds are plain two-class tasks.
DATASET_KINDS = ("massreg", "xfraudtxn", "xfraudaccount")

# Benchmark defaults, one column per schema family in DATASET_KINDS order:
# layer count, hidden width, heads (None where the variant has none), epoch
# cap, diachronic width.  Shared across the board: dropout 0.1, adamw at
# lr 1e-3 with weight decay 0.01, patience 64.
_DEFAULTS: dict[str, tuple] = {
    "gcn": ((4, 4, 4), (256, 256, 256), None, 2048, None),
    "gat": ((8, 2, 2), (256, 256, 128), 4, 2048, None),
    "simple-hgn": ((2, 2, 2), (256, 64, 256), 4, 2048, None),
    "dyhgn": ((4, 2, 4), (256, 256, 128), None, 2048, None),
    "dyhgn-de": ((4, 2, 2), (256, 128, 128), None, 128, (60, 10, 10)),
    "dyhgn-de-hgt": ((4, 2, 2), (256, 128, 128), 4, 128, (30, 10, 10)),
}


@dataclass
class ModelConfig:
    variant: str
    n_layers: int
    n_hid: int
    n_heads: int = 4
    dropout: float = 0.1
    lr: float = 1e-3
    weight_decay: float = 0.01
    max_epochs: int = 2048
    patience: int = 64
    diachronic: DiachronicConfig | None = None
    seed: int = 0
    exclude_temporal_edges: bool = False

    def __post_init__(self):
        check_option("variant", self.variant, VARIANTS)
        check_positive_int("n_layers", self.n_layers)
        check_positive_int("n_hid", self.n_hid)
        check_positive_int("n_heads", self.n_heads)
        check_positive_int("max_epochs", self.max_epochs)
        check_positive_int("patience", self.patience)
        check_unit_interval("dropout", self.dropout, include_one=False)
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigurationError("lr and weight_decay must be non-negative")
        if self.diachronic is not None and self.variant not in DE_VARIANTS:
            raise ConfigurationError(
                f"diachronic settings only apply to {DE_VARIANTS}, "
                f"not {self.variant!r}"
            )
        if self.exclude_temporal_edges and self.variant not in BASELINE_VARIANTS:
            raise ConfigurationError(
                "temporal edges can only be excluded for the baseline variants"
            )


def default_config(variant: str, dataset_kind: str, **overrides) -> ModelConfig:
    """The benchmark defaults for one (variant, schema family) cell."""
    check_option("variant", variant, VARIANTS)
    check_option("dataset_kind", dataset_kind, DATASET_KINDS)
    layers, hidden, heads, epochs, de = _DEFAULTS[variant]
    col = DATASET_KINDS.index(dataset_kind)
    values: dict = {
        "variant": variant,
        "n_layers": layers[col],
        "n_hid": hidden[col],
        "max_epochs": epochs,
    }
    if heads is not None:
        values["n_heads"] = heads
    if de is not None:
        values["diachronic"] = DiachronicConfig(d=de[col])
    values.update(overrides)
    return ModelConfig(**values)


def infer_dataset_kind(graph: UnrolledGraph) -> str:
    """Schema family implied by the ingested labels and target type."""
    if not graph.target_entities:
        raise ValidationError("graph has no labeled targets")
    if graph.risk_labels is not None:
        return "massreg"
    if graph.target_entities[0].node_type == "txn":
        return "xfraudtxn"
    return "xfraudaccount"


def head_width(graph: UnrolledGraph, dataset_kind: str) -> int:
    check_option("dataset_kind", dataset_kind, DATASET_KINDS)
    if dataset_kind != "massreg":
        return 2
    if graph.risk_labels is None:
        raise ValidationError("the massreg schema needs a risk level per target")
    # one binary logit plus one column per distinct ingested risk level
    return 1 + int(np.unique(graph.risk_labels).size)


def task_loss(
    logits: Tensor,
    binary: np.ndarray,
    risk_codes: np.ndarray | None,
    dataset_kind: str,
) -> Tensor:
    """Dual-head average for massreg, two-class cross entropy otherwise."""
    check_option("dataset_kind", dataset_kind, DATASET_KINDS)
    binary = np.asarray(binary, dtype=np.int64)
    if dataset_kind != "massreg":
        return t.cross_entropy(logits, binary)
    if risk_codes is None:
        raise ValidationError("the dual-head loss needs a risk level per target")
    width = logits.data.shape[1]
    bce = t.binary_cross_entropy_with_logits(
        t.slice_cols(logits, 0, 1), binary.astype(np.float64).reshape(-1, 1)
    )
    ce = t.cross_entropy(t.slice_cols(logits, 1, width), np.asarray(risk_codes))
    return t.scale(t.add(bce, ce), 0.5)


def eval_scores(logits: np.ndarray, dataset_kind: str) -> np.ndarray:
    """Per-row ranking score: binary-head logit, or the class-logit margin."""
    if dataset_kind == "massreg":
        return np.array(logits[:, 0], dtype=np.float64)
    return np.asarray(logits[:, 1] - logits[:, 0], dtype=np.float64)


def _typed_edges(
    graph: UnrolledGraph, edge_set: str
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Directed (src, dst, relation) arrays; temporal edges get the code
    after the last ingested relation."""
    src, dst = directed_edges(graph, edge_set)
    parts = []
    if edge_set in ("structural", "union"):
        parts.append(graph.structural_rel)
    if edge_set in ("temporal", "union"):
        k = 2 * graph.temporal_replica.size
        parts.append(np.full(k, len(graph.relations), dtype=np.int64))
    rel = np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)
    return src, dst, rel


class _NodeModel:
    """Shared plumbing: seeded construction and the per-node logit contract."""

    variant: str = ""

    def __init__(self, graph: UnrolledGraph, config: ModelConfig, dataset_kind: str):
        self.graph = graph
        self.config = config
        self.dataset_kind = dataset_kind
        self.n_out = head_width(graph, dataset_kind)
        self._rng = np.random.default_rng(config.seed)
        # dropout between layers draws from its own stream, spawned before
        # any weight so layer initialization stays comparable across variants
        self._drop_rng = np.random.default_rng(int(self._rng.integers(2**63)))
        self.x = Tensor(graph.features)

    def _dropout(self, h: Tensor, training: bool) -> Tensor:
        return t.dropout(h, self.config.dropout, training, self._drop_rng)

    def forward(self, training: bool) -> Tensor:
        raise NotImplementedError

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        raise NotImplementedError

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def parameter_count(self) -> int:
        return int(sum(p.data.size for _, p in self.named_parameters()))


class GCNModel(_NodeModel):
    """Stacked normalized convolutions that ignore node and edge types."""

    variant = "gcn"

    def __init__(self, graph, config, dataset_kind):
        super().__init__(graph, config, dataset_kind)
        edge_set = "structural" if config.exclude_temporal_edges else "union"
        self.adj = normalized_adjacency(graph, edge_set)
        d = graph.features.shape[1]
        self.convs = []
        for _ in range(config.n_layers):
            self.convs.append(GCNConv(d, config.n_hid, self._rng))
            d = config.n_hid
        self.head = MLPHead(
            config.n_hid, config.n_hid, self.n_out, config.dropout, self._rng
        )

    def forward(self, training: bool) -> Tensor:
        h = self.x
        for conv in self.convs:
            h = self._dropout(t.relu(conv(h, self.adj)), training)
        return self.head(h, training)

    def named_parameters(self):
        for i, conv in enumerate(self.convs):
            for name, p in conv.named_parameters():
                yield f"conv{i}.{name}", p
        for name, p in self.head.named_parameters():
            yield f"head.{name}", p


class GATModel(_NodeModel):
    """Multi-head attention layers that ignore node and edge types."""

    variant = "gat"

    def __init__(self, graph, config, dataset_kind):
        super().__init__(graph, config, dataset_kind)
        if config.n_hid % config.n_heads:
            raise ConfigurationError(
                f"n_hid={config.n_hid} must be divisible by n_heads={config.n_heads}"
            )
        edge_set = "structural" if config.exclude_temporal_edges else "union"
        self.src, self.dst = directed_edges(graph, edge_set)
        d_head = config.n_hid // config.n_heads
        d = graph.features.shape[1]
        self.convs = []
        for _ in range(config.n_layers):
            self.convs.append(GATConv(d, d_head, config.n_heads, self._rng))
            d = config.n_hid
        self.head = MLPHead(
            config.n_hid, config.n_hid, self.n_out, config.dropout, self._rng
        )

    def forward(self, training: bool) -> Tensor:
        h = self.x
        n = self.graph.n_nodes
        for conv in self.convs:
            h = self._dropout(t.relu(conv(h, self.src, self.dst, n)), training)
        return self.head(h, training)

    def named_parameters(self):
        for i, conv in enumerate(self.convs):
            for name, p in conv.named_parameters():
                yield f"conv{i}.{name}", p
        for name, p in self.head.named_parameters():
            yield f"head.{name}", p


class SimpleHGNModel(_NodeModel):
    """Attention with learned edge-type embeddings; temporal edges are one
    extra edge type on top of the ingested relations."""

    variant = "simple-hgn"

    def __init__(self, graph, config, dataset_kind):
        super().__init__(graph, config, dataset_kind)
        if config.n_hid % config.n_heads:
            raise ConfigurationError(
                f"n_hid={config.n_hid} must be divisible by n_heads={config.n_heads}"
            )
        edge_set = "structural" if config.exclude_temporal_edges else "union"
        self.src, self.dst, self.rel = _typed_edges(graph, edge_set)
        n_rel = len(graph.relations) + (0 if config.exclude_temporal_edges else 1)
        d_head = config.n_hid // config.n_heads
        d = graph.features.shape[1]
        self.convs = []
        for _ in range(config.n_layers):
            self.convs.append(
                SimpleHGNConv(d, d_head, config.n_heads, n_rel, self._rng)
            )
            d = config.n_hid
        self.head = MLPHead(
            config.n_hid, config.n_hid, self.n_out, config.dropout, self._rng
        )

    def forward(self, training: bool) -> Tensor:
        h = self.x
        n = self.graph.n_nodes
        for conv in self.convs:
            h = self._dropout(
                t.relu(conv(h, self.src, self.dst, self.rel, n)), training
            )
        return self.head(h, training)

    def named_parameters(self):
        for i, conv in enumerate(self.convs):
            for name, p in conv.named_parameters():
                yield f"conv{i}.{name}", p
        for name, p in self.head.named_parameters():
            yield f"head.{name}", p


class _DyHGNBlock:
    """One structural pass, a fused transform, then one temporal pass."""

    def __init__(self, d_in: int, d_hid: int, rng: np.random.Generator):
        self.conv_struct = GCNConv(d_in, d_hid, rng)
        self.fc = Linear(d_hid, d_hid, rng)
        self.norm = LayerNorm(d_hid)
        self.conv_time = GCNConv(d_hid, d_hid, rng)

    def __call__(self, h, adj_struct, adj_time, dropout_p, training, drop_rng):
        h = self.conv_struct(h, adj_struct)
        h = t.relu(self.norm(self.fc(h)))
        h = t.dropout(h, dropout_p, training, drop_rng)
        return self.conv_time(h, adj_time)

    def named_parameters(self):
        groups = (
            ("struct", self.conv_struct),
            ("fc", self.fc),
            ("norm", self.norm),
            ("time", self.conv_time),
        )
        for prefix, module in groups:
            for name, p in module.named_parameters():
                yield f"{prefix}.{name}", p


class _DyHGNCore:
    """Block stack plus classification head, shared by the dyhgn family."""

    def __init__(self, graph, config, n_out: int, d_in: int, rng):
        self.adj_struct = normalized_adjacency(graph, "structural")
        self.adj_time = normalized_adjacency(graph, "temporal")
        self.blocks = []
        d = d_in
        for _ in range(config.n_layers):
            self.blocks.append(_DyHGNBlock(d, config.n_hid, rng))
            d = config.n_hid
        self.head = MLPHead(config.n_hid, config.n_hid, n_out, config.dropout, rng)

    def __call__(self, h: Tensor, dropout_p: float, training: bool, drop_rng) -> Tensor:
        for block in self.blocks:
            h = block(h, self.adj_struct, self.adj_time, dropout_p, training, drop_rng)
        return self.head(h, training)

    def named_parameters(self):
        for i, block in enumerate(self.blocks):
            for name, p in block.named_parameters():
                yield f"block{i}.{name}", p
        for name, p in self.head.named_parameters():
            yield f"head.{name}", p


class DyHGNModel(_NodeModel):
    """Alternating structural and temporal convolutions per layer block."""

    variant = "dyhgn"

    def __init__(self, graph, config, dataset_kind):
        super().__init__(graph, config, dataset_kind)
        self.core = _DyHGNCore(
            graph, config, self.n_out, graph.features.shape[1], self._rng
        )

    def forward(self, training: bool) -> Tensor:
        return self.core(self.x, self.config.dropout, training, self._drop_rng)

    def named_parameters(self):
        yield from self.core.named_parameters()


def _require_diachronic(config: ModelConfig) -> DiachronicConfig:
    if config.diachronic is None:
        raise ConfigurationError(f"{config.variant} needs diachronic settings")
    return config.diachronic


def _message_width(de_config: DiachronicConfig) -> int:
    return 1 if de_config.scalar_scores else de_config.d


class DyHGNDEModel(_NodeModel):
    """DyHGN over features extended with aggregated diachronic messages."""

    variant = "dyhgn-de"

    def __init__(self, graph, config, dataset_kind):
        super().__init__(graph, config, dataset_kind)
        de_config = _require_diachronic(config)
        self.de = DiachronicParams.for_graph(graph, de_config, self._rng)
        d_in = graph.features.shape[1] + _message_width(de_config)
        self.core = _DyHGNCore(graph, config, self.n_out, d_in, self._rng)

    def forward(self, training: bool) -> Tensor:
        h = build_x_de(self.graph, self.x, self.de)
        return self.core(h, self.config.dropout, training, self._drop_rng)

    def named_parameters(self):
        for name, p in self.de.named_parameters():
            yield f"de.{name}", p
        yield from self.core.named_parameters()


class DyHGNDEHGTModel(_NodeModel):
    """One typed attention pass over the structural edges in front of DyHGN."""

    variant = "dyhgn-de-hgt"

    def __init__(self, graph, config, dataset_kind):
        super().__init__(graph, config, dataset_kind)
        de_config = _require_diachronic(config)
        self.de = DiachronicParams.for_graph(graph, de_config, self._rng)
        self.type_codes = graph.node_type_array()
        d_in = graph.features.shape[1] + _message_width(de_config)
        # hubs have no structural edges, so the typed pass keeps self-loops on
        self.hgt = HGTConv(
            d_in,
            config.n_hid,
            config.n_heads,
            int(self.type_codes.max()) + 1,
            len(graph.relations),
            self._rng,
            residual=True,
            add_self_loops=True,
        )
        self.core = _DyHGNCore(graph, config, self.n_out, config.n_hid, self._rng)

    def forward(self, training: bool) -> Tensor:
        g = self.graph
        h = build_x_de(g, self.x, self.de)
        h = self.hgt(
            h, g.structural_src, g.structural_dst, g.structural_rel,
            self.type_codes, g.n_nodes,
        )
        return self.core(h, self.config.dropout, training, self._drop_rng)

    def named_parameters(self):
        for name, p in self.de.named_parameters():
            yield f"de.{name}", p
        for name, p in self.hgt.named_parameters():
            yield f"hgt.{name}", p
        yield from self.core.named_parameters()


_MODEL_CLASSES = {
    cls.variant: cls
    for cls in (
        GCNModel,
        GATModel,
        SimpleHGNModel,
        DyHGNModel,
        DyHGNDEModel,
        DyHGNDEHGTModel,
    )
}


def assemble(
    variant: str, graph: UnrolledGraph, config: ModelConfig | None = None
) -> _NodeModel:
    """Build one model variant for a graph, filling benchmark defaults."""
    check_option("variant", variant, VARIANTS)
    kind = infer_dataset_kind(graph)
    if config is None:
        config = default_config(variant, kind)
    if config.variant != variant:
        raise ConfigurationError(
            f"config is for variant {config.variant!r}, not {variant!r}"
        )
    if variant in DE_VARIANTS and config.diachronic is None:
        de_dims = _DEFAULTS[variant][4]
        config = replace(
            config, diachronic=DiachronicConfig(d=de_dims[DATASET_KINDS.index(kind)])
        )
    return _MODEL_CLASSES[variant](graph, config, kind)


@dataclass
class TrainReport:
    """Metrics from one training run.

    Test metrics come from the parameters at the best validation epoch,
    never the last; they are nan when the split has no test rows.
    """

    variant: str
    seed: int
    train_losses: list[float]
    val_losses: list[float]
    best_val_ap: float
    best_epoch: int
    test_ap: float
    test_auc: float
    wall_clock_seconds: float

    def as_dict(self) -> dict:
        return {
            "variant": self.variant,
            "seed": self.seed,
            "train_losses": list(self.train_losses),
            "val_losses": list(self.val_losses),
            "best_val_ap": self.best_val_ap,
            "best_epoch": self.best_epoch,
            "test_ap": self.test_ap,
            "test_auc": self.test_auc,
            "wall_clock_seconds": self.wall_clock_seconds,
        }


def _risk_code_table(graph: UnrolledGraph) -> np.ndarray | None:
    """Risk levels mapped to contiguous class ids over the ingested labels."""
    if graph.risk_labels is None:
        return None
    levels = np.unique(graph.risk_labels)
    return np.searchsorted(levels, graph.risk_labels).astype(np.int64)


def train(
    model: _NodeModel,
    graph: UnrolledGraph,
    split: Split,
    config: ModelConfig | None = None,
) -> TrainReport:
    """Full-graph gradient steps with early stopping on validation AP.

    Only training-split target rows contribute to the loss; the parameters
    from the best validation epoch are restored before test metrics are
    computed.
    """
    if model.graph is not graph:
        raise ConfigurationError("model was assembled for a different graph")
    config = model.config if config is None else config
    if split.val.size == 0:
        raise ValidationError("early stopping needs a non-empty validation split")
    kind = model.dataset_kind
    binary = graph.binary_labels.astype(np.int64)
    risk_codes = _risk_code_table(graph)
    params = model.parameters()
    target_nodes = graph.target_nodes
    train_rows = target_nodes[split.train]
    val_rows = target_nodes[split.val]

    start = time.perf_counter()
    optimizer = None
    best_val_ap = -np.inf
    best_epoch = -1
    snapshot: list[np.ndarray] = []
    stale = 0
    train_losses: list[float] = []
    val_losses: list[float] = []
    for epoch in range(config.max_epochs):
        with Tape() as tape:
            logits = model.forward(training=True)
            loss = task_loss(
                t.gather_rows(logits, train_rows),
                binary[split.train],
                None if risk_codes is None else risk_codes[split.train],
                kind,
            )
            loss_value = float(loss.data)
            if not np.isfinite(loss_value):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}")
            backward(loss, tape)
        if optimizer is None:
            # only tensors the forward actually touches carry gradients;
            # which ones is decided by the graph, so the set is stable
            optimizer = AdamW(
                [p for p in params if p.grad is not None],
                lr=config.lr,
                weight_decay=config.weight_decay,
            )
        optimizer.step()
        optimizer.zero_grad()
        train_losses.append(loss_value)

        logits_eval = model.forward(training=False)
        val_loss = task_loss(
            t.gather_rows(logits_eval, val_rows),
            binary[split.val],
            None if risk_codes is None else risk_codes[split.val],
            kind,
        )
        val_losses.append(float(val_loss.data))
        scores = eval_scores(logits_eval.data[target_nodes], kind)
        val_ap = average_precision(scores[split.val], binary[split.val])
        if val_ap > best_val_ap:
            best_val_ap = val_ap
            best_epoch = epoch
            snapshot = [p.data.copy() for p in params]
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break

    for p, saved in zip(params, snapshot):
        p.data = saved
    logits_eval = model.forward(training=False)
    scores = eval_scores(logits_eval.data[target_nodes], kind)
    if split.test.size:
        test_ap = average_precision(scores[split.test], binary[split.test])
        test_auc = roc_auc(scores[split.test], binary[split.test])
    else:
        test_ap = test_auc = float("nan")
    return TrainReport(
        variant=model.variant,
        seed=config.seed,
        train_losses=train_losses,
        val_losses=val_losses,
        best_val_ap=best_val_ap,
        best_epoch=best_epoch,
        test_ap=test_ap,
        test_auc=test_auc,
        wall_clock_seconds=time.perf_counter() - start,
    )


def train_seeds(
    variant: str,
    graph: UnrolledGraph,
    split: Split,
    config: ModelConfig | None = None,
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
) -> tuple[list[TrainReport], dict]:
    """One independent run per seed plus a mean/std summary of test metrics."""
    if config is None:
        config = default_config(variant, infer_dataset_kind(graph))
    reports = []
    for seed in seeds:
        cfg = replace(config, seed=int(seed))
        model = assemble(variant, graph, cfg)
        reports.append(train(model, graph, split, cfg))
    return reports, summarize_reports(variant, seeds, reports)


def summarize_reports(
    variant: str, seeds: Sequence[int], reports: Sequence[TrainReport]
) -> dict:
    """Mean/std of test metrics over one run per seed."""

    def stat(values: list[float]) -> tuple[float, float]:
        arr = np.array(values, dtype=np.float64)
        return float(arr.mean()), float(arr.std())

    ap_mean, ap_std = stat([r.test_ap for r in reports])
    auc_mean, auc_std = stat([r.test_auc for r in reports])
    val_mean, val_std = stat([r.best_val_ap for r in reports])
    return {
        "variant": variant,
        "seeds": [int(s) for s in seeds],
        "test_ap_mean": ap_mean,
        "test_ap_std": ap_std,
        "test_auc_mean": auc_mean,
        "test_auc_std": auc_std,
        "best_val_ap_mean": val_mean,
        "best_val_ap_std": val_std,
    }


def save_checkpoint(model: _NodeModel, directory) -> dict[str, str]:
    """Parameters as flat little-endian float64 plus a JSON manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    blobs = []
    offset = 0
    for name, p in model.named_parameters():
        arr = np.ascontiguousarray(p.data, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    weights_path = directory / "weights.bin"
    manifest_path = directory / "manifest.json"
    weights_path.write_bytes(b"".join(blobs))
    manifest = {
        "dtype": "<f8",
        "variant": model.variant,
        "total_bytes": offset,
        "parameters": entries,
    }
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return {"weights": str(weights_path), "manifest": str(manifest_path)}


def load_checkpoint(model: _NodeModel, directory) -> None:
    """Restore parameters written by save_checkpoint, matched by name."""
    directory = Path(directory)
    with open(directory / "manifest.json") as fh:
        manifest = json.load(fh)
    if manifest.get("dtype") != "<f8":
        raise ValidationError(
            f"unsupported checkpoint dtype {manifest.get('dtype')!r}"
        )
    buf = (directory / "weights.bin").read_bytes()
    by_name = {e["name"]: e for e in manifest["parameters"]}
    params = dict(model.named_parameters())
    missing = sorted(set(params) - set(by_name))
    extra = sorted(set(by_name) - set(params))
    if missing or extra:
        raise ValidationError(
            f"checkpoint does not match the model: missing {missing}, "
            f"unexpected {extra}"
        )
    for name, p in params.items():
        entry = by_name[name]
        shape = tuple(entry["shape"])
        if shape != p.data.shape:
            raise ValidationError(
                f"parameter {name} has shape {p.data.shape}, "
                f"checkpoint has {shape}"
            )
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(buf, dtype="<f8", count=count, offset=entry["offset"])
        p.data = arr.reshape(shape).astype(np.float64)


class GraphNodeClassifier(BaseEstimator):
    """Transductive estimator wrapping graph construction and training.

    ``fit`` ingests the full event log plus labels, holds out the most
    recent ``val_fraction`` of targets for early stopping, and keeps the
    trained model.  Predictions are defined only for entities present in
    the fitted log: every edge is visible during training and the splits
    differ solely in label availability.
    """

    def __init__(
        self,
        variant: str = "dyhgn",
        n_layers: int = 2,
        n_hid: int = 64,
        n_heads: int = 4,
        dropout: float = 0.1,
        lr: float = 1e-3,
        weight_decay: float = 0.01,
        max_epochs: int = 128,
        patience: int = 16,
        de_dim: int = 16,
        gamma: float = 0.5,
        aggregation: str = "lstm",
        score_mode: str = "full_triple",
        val_fraction: float = 0.15,
        T: int | None = None,
        seed: int = 0,
        exclude_temporal_edges: bool = False,
    ):
        self.variant = variant
        self.n_layers = n_layers
        self.n_hid = n_hid
        self.n_heads = n_heads
        self.dropout = dropout
        self.lr = lr
        self.weight_decay = weight_decay
        self.max_epochs = max_epochs
        self.patience = patience
        self.de_dim = de_dim
        self.gamma = gamma
        self.aggregation = aggregation
        self.score_mode = score_mode
        self.val_fraction = val_fraction
        self.T = T
        self.seed = seed
        self.exclude_temporal_edges = exclude_temporal_edges

    def _config(self) -> ModelConfig:
        diachronic = None
        if self.variant in DE_VARIANTS:
            diachronic = DiachronicConfig(
                d=self.de_dim,
                gamma=self.gamma,
                aggregation=self.aggregation,
                score_mode=self.score_mode,
            )
        return ModelConfig(
            variant=self.variant,
            n_layers=self.n_layers,
            n_hid=self.n_hid,
            n_heads=self.n_heads,
            dropout=self.dropout,
            lr=self.lr,
            weight_decay=self.weight_decay,
            max_epochs=self.max_epochs,
            patience=self.patience,
            diachronic=diachronic,
            seed=self.seed,
            exclude_temporal_edges=self.exclude_temporal_edges,
        )

    def fit(self, X, y) -> "GraphNodeClassifier":
        events = list(X)
        if not isinstance(y, LabelSet):
            raise ValidationError("y must be a LabelSet")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigurationError(
                f"val_fraction must be in (0, 1), got {self.val_fraction}"
            )
        horizon = self.T if self.T is not None else max(e.week for e in events)
        graph = build_unrolled_graph(events, y, horizon)
        weeks, days = graph.target_creation_times()
        split = chronological_split(
            graph.target_entities,
            weeks,
            days,
            ratios=(1.0 - self.val_fraction, self.val_fraction, 0.0),
        )
        config = self._config()
        model = assemble(self.variant, graph, config)
        self.report_ = train(model, graph, split, config)
        self.model_ = model
        self.graph_ = graph
        self.classes_ = np.array([0, 1], dtype=np.int64)
        return self

    def _target_logits(self) -> np.ndarray:
        if not hasattr(self, "model_"):
            raise NotFittedError("fit must be called before predicting")
        logits = self.model_.forward(training=False).data
        return logits[self.graph_.target_nodes]

    def _positions(self, X) -> np.ndarray:
        if X is None:
            return np.arange(len(self.graph_.target_entities), dtype=np.int64)
        index = {e: i for i, e in enumerate(self.graph_.target_entities)}
        rows = []
        for ref in X:
            if ref not in index:
                raise ValidationError(f"unknown target entity {ref}")
            rows.append(index[ref])
        return np.array(rows, dtype=np.int64)

    def decision_function(self, X=None) -> np.ndarray:
        logits = self._target_logits()
        return eval_scores(logits, self.model_.dataset_kind)[self._positions(X)]

    def predict_proba(self, X=None) -> np.ndarray:
        logits = self._target_logits()[self._positions(X)]
        if self.model_.dataset_kind == "massreg":
            p = expit(logits[:, 0])
        else:
            p = softmax(logits[:, :2], axis=1)[:, 1]
        return np.column_stack([1.0 - p, p])

    def predict(self, X=None) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(np.int64)


__all__ = [
    "VARIANTS",
    "BASELINE_VARIANTS",
    "DE_VARIANTS",
    "DATASET_KINDS",
    "ModelConfig",
    "default_config",
    "infer_dataset_kind",
    "head_width",
    "task_loss",
    "eval_scores",
    "assemble",
    "TrainReport",
    "train",
    "train_seeds",
    "summarize_reports",
    "save_checkpoint",
    "load_checkpoint",
    "GraphNodeClassifier",
    "GCNModel",
    "GATModel",
    "SimpleHGNModel",
    "DyHGNModel",
    "DyHGNDEModel",
    "DyHGNDEHGTModel",
]
