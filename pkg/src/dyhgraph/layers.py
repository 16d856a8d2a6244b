"""Neural building blocks on top of the tensor engine.

Every layer owns its parameter tensors, exposes them through
``named_parameters``, and is called with plain positional tensors plus the
constant index arrays describing the graph.  Attention layers can optionally
return their per-edge attention weights for inspection.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import tensor as t
from .errors import ConfigurationError, ContractError
from .tensor import SparseMatrix, Tensor

LEAKY_SLOPE = 0.2


def glorot_uniform(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-limit, limit, size=(d_in, d_out))


class Linear:
    """Affine map ``x @ W + b`` with Glorot-uniform weights, zero bias."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Tensor(glorot_uniform(rng, d_in, d_out), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = t.matmul(x, self.weight)
        if self.bias is not None:
            out = t.add(out, self.bias)
        return out

    def named_parameters(self):
        yield "weight", self.weight
        if self.bias is not None:
            yield "bias", self.bias


class LayerNorm:
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return t.layer_norm(x, self.gain, self.bias, eps=self.eps)

    def named_parameters(self):
        yield "gain", self.gain
        yield "bias", self.bias


def gcn_conv(x: Tensor, adj: SparseMatrix, weight: Tensor) -> Tensor:
    """One graph-convolution step: normalized adjacency times ``x @ weight``."""
    return t.spmm(adj, t.matmul(x, weight))


class GCNConv:
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.weight = Tensor(glorot_uniform(rng, d_in, d_out), requires_grad=True)

    def __call__(self, x: Tensor, adj: SparseMatrix) -> Tensor:
        return gcn_conv(x, adj, self.weight)

    def named_parameters(self):
        yield "weight", self.weight


def _with_self_loops(src: np.ndarray, dst: np.ndarray, n: int, rel: np.ndarray | None, self_rel: int):
    loops = np.arange(n, dtype=np.int64)
    src = np.concatenate([src, loops])
    dst = np.concatenate([dst, loops])
    if rel is None:
        return src, dst, None
    rel = np.concatenate([rel, np.full(n, self_rel, dtype=np.int64)])
    return src, dst, rel


class _EdgeMemo:
    """Remember index arrays derived from one set of input arrays.

    The derived arrays keep their identity across epochs, which lets the
    scatter-matrix cache in the tensor engine hit.
    """

    def __init__(self):
        self._key = None
        self._keep = None
        self._val = None

    def get(self, key_arrays, builder):
        key = tuple(id(a) for a in key_arrays)
        if self._key != key:
            self._val = builder()
            self._key = key
            self._keep = key_arrays
        return self._val


def _check_coverage(src: np.ndarray, dst: np.ndarray, n: int) -> None:
    incident = np.zeros(n, dtype=np.int64)
    if dst.size:
        incident += np.bincount(dst, minlength=n)
        incident += np.bincount(src, minlength=n)
    if (incident == 0).any():
        missing = int(np.argmin(incident))
        raise ContractError(
            f"node {missing} has no incident edge and no self-loop"
        )


class GATConv:
    """Multi-head additive attention over a directed edge list.

    Per head: logits ``leaky_relu(a_dst . W x_i + a_src . W x_j)`` for each
    edge j -> i, softmax-normalized over the edges entering i, then an
    attention-weighted sum of the projected sources.  Heads are concatenated.
    """

    def __init__(
        self,
        d_in: int,
        d_head: int,
        heads: int,
        rng: np.random.Generator,
        add_self_loops: bool = True,
    ):
        self.heads = heads
        self.d_head = d_head
        self.add_self_loops = add_self_loops
        self.weights = [
            Tensor(glorot_uniform(rng, d_in, d_head), requires_grad=True)
            for _ in range(heads)
        ]
        self.att_src = [
            Tensor(glorot_uniform(rng, d_head, 1), requires_grad=True) for _ in range(heads)
        ]
        self.att_dst = [
            Tensor(glorot_uniform(rng, d_head, 1), requires_grad=True) for _ in range(heads)
        ]
        self._memo = _EdgeMemo()

    def _edge_logits(self, h: Tensor, src, dst, head: int) -> Tensor:
        s_src = t.gather_rows(t.matmul(h, self.att_src[head]), src)
        s_dst = t.gather_rows(t.matmul(h, self.att_dst[head]), dst)
        return t.leaky_relu(t.add(s_dst, s_src), LEAKY_SLOPE)

    def __call__(self, x: Tensor, src, dst, n: int, return_attention: bool = False):
        src = np.asarray(src, dtype=np.int64)
        dst = np.asarray(dst, dtype=np.int64)
        if self.add_self_loops:
            src, dst, _ = self._memo.get(
                (src, dst), lambda: _with_self_loops(src, dst, n, None, 0)
            )
        _check_coverage(src, dst, n)
        outs, atts = [], []
        for head in range(self.heads):
            h = t.matmul(x, self.weights[head])
            logits = self._edge_logits(h, src, dst, head)
            att = t.segment_softmax(logits, dst, n)
            msg = t.mul(att, t.gather_rows(h, src))
            outs.append(t.scatter_aggregate(msg, dst, n, "sum"))
            atts.append(att.data[:, 0])
        out = t.concat_cols(outs)
        if return_attention:
            return out, np.stack(atts, axis=1)
        return out

    def named_parameters(self):
        for head in range(self.heads):
            yield f"head{head}.weight", self.weights[head]
            yield f"head{head}.att_src", self.att_src[head]
            yield f"head{head}.att_dst", self.att_dst[head]


class SimpleHGNConv:
    """GAT-style attention with a learned edge-type term in the logits.

    Each edge type contributes ``a_edge . E[type]`` to the attention logit.
    The output gets a residual connection (projected when widths differ) and
    is L2-normalized per row; both can be disabled for equivalence checks.
    """

    def __init__(
        self,
        d_in: int,
        d_head: int,
        heads: int,
        n_relations: int,
        rng: np.random.Generator,
        edge_dim: int = 32,
        residual: bool = True,
        normalize: bool = True,
        add_self_loops: bool = True,
    ):
        self.heads = heads
        self.d_head = d_head
        self.residual = residual
        self.normalize = normalize
        self.add_self_loops = add_self_loops
        # one extra edge-type slot is reserved for self-loops
        self.n_relations = n_relations
        self.type_emb = Tensor(
            rng.normal(0.0, 0.1, size=(n_relations + 1, edge_dim)), requires_grad=True
        )
        self.weights = [
            Tensor(glorot_uniform(rng, d_in, d_head), requires_grad=True)
            for _ in range(heads)
        ]
        self.att_src = [
            Tensor(glorot_uniform(rng, d_head, 1), requires_grad=True) for _ in range(heads)
        ]
        self.att_dst = [
            Tensor(glorot_uniform(rng, d_head, 1), requires_grad=True) for _ in range(heads)
        ]
        self.att_edge = [
            Tensor(glorot_uniform(rng, edge_dim, 1), requires_grad=True)
            for _ in range(heads)
        ]
        d_out = heads * d_head
        self.res_proj = None
        if residual and d_in != d_out:
            self.res_proj = Tensor(glorot_uniform(rng, d_in, d_out), requires_grad=True)
        self._memo = _EdgeMemo()

    def __call__(self, x: Tensor, src, dst, rel, n: int, return_attention: bool = False):
        src = np.asarray(src, dtype=np.int64)
        dst = np.asarray(dst, dtype=np.int64)
        rel = np.asarray(rel, dtype=np.int64)
        if rel.size and (rel.min() < 0 or rel.max() >= self.n_relations):
            raise IndexError(
                f"edge type out of range for {self.n_relations} relation slots"
            )
        if self.add_self_loops:
            src, dst, rel = self._memo.get(
                (src, dst, rel),
                lambda: _with_self_loops(src, dst, n, rel, self.n_relations),
            )
        _check_coverage(src, dst, n)
        outs, atts = [], []
        for head in range(self.heads):
            h = t.matmul(x, self.weights[head])
            s_src = t.gather_rows(t.matmul(h, self.att_src[head]), src)
            s_dst = t.gather_rows(t.matmul(h, self.att_dst[head]), dst)
            s_edge = t.gather_rows(t.matmul(self.type_emb, self.att_edge[head]), rel)
            logits = t.leaky_relu(t.add(t.add(s_dst, s_src), s_edge), LEAKY_SLOPE)
            att = t.segment_softmax(logits, dst, n)
            msg = t.mul(att, t.gather_rows(h, src))
            outs.append(t.scatter_aggregate(msg, dst, n, "sum"))
            atts.append(att.data[:, 0])
        out = t.concat_cols(outs)
        if self.residual:
            res = x if self.res_proj is None else t.matmul(x, self.res_proj)
            out = t.add(out, res)
        if self.normalize:
            out = t.l2_normalize_rows(out)
        if return_attention:
            return out, np.stack(atts, axis=1)
        return out

    def named_parameters(self):
        yield "type_emb", self.type_emb
        for head in range(self.heads):
            yield f"head{head}.weight", self.weights[head]
            yield f"head{head}.att_src", self.att_src[head]
            yield f"head{head}.att_dst", self.att_dst[head]
            yield f"head{head}.att_edge", self.att_edge[head]
        if self.res_proj is not None:
            yield "res_proj", self.res_proj


def _typed_project(x: Tensor, type_rows: Sequence[np.ndarray], linears: Sequence[Linear], n: int) -> Tensor:
    """Apply a per-type linear map and reassemble rows in place."""
    out = None
    for rows, lin in zip(type_rows, linears):
        if rows.size == 0:
            continue
        part = t.scatter_aggregate(lin(t.gather_rows(x, rows)), rows, n, "sum")
        out = part if out is None else t.add(out, part)
    if out is None:
        raise ContractError("typed projection saw no rows of any type")
    return out


class HGTConv:
    """Heterogeneous attention with typed projections and relation matrices.

    Keys/queries/values are projected per node type; logits are
    ``q . W_rel k / sqrt(d_head)`` with a square matrix per edge type;
    attention is normalized per target; the aggregate goes through a
    per-target-type output projection, plus an optional residual.
    """

    def __init__(
        self,
        d_in: int,
        d_out: int,
        heads: int,
        n_node_types: int,
        n_relations: int,
        rng: np.random.Generator,
        residual: bool = True,
        add_self_loops: bool = True,
    ):
        if d_out % heads:
            raise ConfigurationError(
                f"d_out={d_out} must be divisible by heads={heads}"
            )
        self.heads = heads
        self.d_head = d_out // heads
        self.d_out = d_out
        self.n_node_types = n_node_types
        self.n_relations = n_relations
        self.residual = residual
        self.add_self_loops = add_self_loops
        self.key = [Linear(d_in, d_out, rng) for _ in range(n_node_types)]
        self.query = [Linear(d_in, d_out, rng) for _ in range(n_node_types)]
        self.value = [Linear(d_in, d_out, rng) for _ in range(n_node_types)]
        self.out_proj = [Linear(d_out, d_out, rng) for _ in range(n_node_types)]
        # relation matrices start at the identity; one extra slot for self-loops
        self.rel_w = [
            [
                Tensor(np.eye(self.d_head), requires_grad=True)
                for _ in range(n_relations + 1)
            ]
            for _ in range(heads)
        ]
        self.res_proj = None
        if residual and d_in != d_out:
            self.res_proj = Tensor(glorot_uniform(rng, d_in, d_out), requires_grad=True)
        self._memo = _EdgeMemo()

    def __call__(
        self,
        x: Tensor,
        src,
        dst,
        rel,
        node_type_codes: np.ndarray,
        n: int,
        return_attention: bool = False,
    ):
        src = np.asarray(src, dtype=np.int64)
        dst = np.asarray(dst, dtype=np.int64)
        rel = np.asarray(rel, dtype=np.int64)
        codes = np.asarray(node_type_codes, dtype=np.int64)
        if rel.size and (rel.min() < 0 or rel.max() >= self.n_relations):
            raise IndexError(
                f"edge type out of range for {self.n_relations} relation slots"
            )

        def build():
            s, d, r = src, dst, rel
            if self.add_self_loops:
                s, d, r = _with_self_loops(s, d, n, r, self.n_relations)
            type_rows = [
                np.where(codes == c)[0].astype(np.int64)
                for c in range(self.n_node_types)
            ]
            rel_rows = [
                np.where(r == rr)[0].astype(np.int64)
                for rr in range(self.n_relations + 1)
            ]
            return s, d, r, type_rows, rel_rows

        src, dst, rel, type_rows, rel_rows = self._memo.get((src, dst, rel, codes), build)
        _check_coverage(src, dst, n)
        k = _typed_project(x, type_rows, self.key, n)
        q = _typed_project(x, type_rows, self.query, n)
        v = _typed_project(x, type_rows, self.value, n)
        scale = 1.0 / math.sqrt(self.d_head)
        outs, atts = [], []
        n_edges = len(src)
        for head in range(self.heads):
            lo, hi = head * self.d_head, (head + 1) * self.d_head
            k_h = t.slice_cols(k, lo, hi)
            q_h = t.slice_cols(q, lo, hi)
            v_h = t.slice_cols(v, lo, hi)
            ones = Tensor(np.ones((self.d_head, 1)))
            logits = None
            for r, rows in enumerate(rel_rows):
                if rows.size == 0:
                    continue
                k_sel = t.matmul(t.gather_rows(k_h, src[rows]), self.rel_w[head][r])
                q_sel = t.gather_rows(q_h, dst[rows])
                dot = t.matmul(t.mul(q_sel, k_sel), ones)
                part = t.scatter_aggregate(dot, rows, n_edges, "sum")
                logits = part if logits is None else t.add(logits, part)
            att = t.segment_softmax(t.scale(logits, scale), dst, n)
            msg = t.mul(att, t.gather_rows(v_h, src))
            outs.append(t.scatter_aggregate(msg, dst, n, "sum"))
            atts.append(att.data[:, 0])
        agg = t.concat_cols(outs)
        out = _typed_project(agg, type_rows, self.out_proj, n)
        if self.residual:
            res = x if self.res_proj is None else t.matmul(x, self.res_proj)
            out = t.add(out, res)
        if return_attention:
            return out, np.stack(atts, axis=1)
        return out

    def named_parameters(self):
        groups = (
            ("key", self.key),
            ("query", self.query),
            ("value", self.value),
            ("out_proj", self.out_proj),
        )
        for group_name, linears in groups:
            for c, lin in enumerate(linears):
                for name, p in lin.named_parameters():
                    yield f"{group_name}{c}.{name}", p
        for head in range(self.heads):
            for r, w in enumerate(self.rel_w[head]):
                yield f"head{head}.rel_w{r}", w
        if self.res_proj is not None:
            yield "res_proj", self.res_proj


class LSTMCell:
    """Standard LSTM cell; gate order is input, forget, cell, output."""

    def __init__(self, d_in: int, d_hidden: int, rng: np.random.Generator):
        self.d_in = d_in
        self.d_hidden = d_hidden
        self.w_x = Tensor(glorot_uniform(rng, d_in, 4 * d_hidden), requires_grad=True)
        self.w_h = Tensor(glorot_uniform(rng, d_hidden, 4 * d_hidden), requires_grad=True)
        self.bias = Tensor(np.zeros(4 * d_hidden), requires_grad=True)

    def step(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        d = self.d_hidden
        z = t.add(t.add(t.matmul(x, self.w_x), t.matmul(h, self.w_h)), self.bias)
        i = t.sigmoid(t.slice_cols(z, 0, d))
        f = t.sigmoid(t.slice_cols(z, d, 2 * d))
        g = t.tanh(t.slice_cols(z, 2 * d, 3 * d))
        o = t.sigmoid(t.slice_cols(z, 3 * d, 4 * d))
        c_next = t.add(t.mul(f, c), t.mul(i, g))
        h_next = t.mul(o, t.tanh(c_next))
        return h_next, c_next

    def named_parameters(self):
        yield "w_x", self.w_x
        yield "w_h", self.w_h
        yield "bias", self.bias


def lstm_forward(cell: LSTMCell, steps: Sequence[Tensor]) -> Tensor:
    """Run a sequence through the cell from a zero state; return final hidden."""
    steps = list(steps)
    if not steps:
        raise ContractError("lstm_forward needs at least one step")
    batch = steps[0].data.shape[0]
    h = Tensor(np.zeros((batch, cell.d_hidden)))
    c = Tensor(np.zeros((batch, cell.d_hidden)))
    for x in steps:
        h, c = cell.step(x, h, c)
    return h


class MLPHead:
    """Classification head: linear, layer norm, relu, dropout, linear."""

    def __init__(
        self,
        d_in: int,
        d_hidden: int,
        n_out: int,
        dropout_p: float,
        rng: np.random.Generator,
    ):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.norm = LayerNorm(d_hidden)
        self.fc2 = Linear(d_hidden, n_out, rng)
        self.dropout_p = dropout_p
        self._drop_rng = np.random.default_rng(int(rng.integers(2**63)))

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        h = t.relu(self.norm(self.fc1(x)))
        h = t.dropout(h, self.dropout_p, training, self._drop_rng)
        return self.fc2(h)

    def named_parameters(self):
        for name, p in self.fc1.named_parameters():
            yield f"fc1.{name}", p
        for name, p in self.norm.named_parameters():
            yield f"norm.{name}", p
        for name, p in self.fc2.named_parameters():
            yield f"fc2.{name}", p
