"""Distillation losses and the many-to-many layer mapping.

Four losses (embedding, prediction, attention, hidden-state), the
transport-driven layer mapping that weights every teacher/student layer
pair by an optimal flow, the per-batch cost-attention weight update, and
a one-to-one skip-mapping baseline for ablations.

Gradient contract: the optimal flow of a batch is treated as a constant,
so the EMD losses differentiate only through the ground distances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import DimensionError, ParameterError, Tensor
from .transport import FlowMatrix, TransportProblem, solve

MODES = ("full", "no_emd", "no_ca", "one_to_one")

_UNIT_COST_FLOOR = 1e-12


@dataclass
class LayerWeights:
    """Per-layer supply/demand weights used by the transport problems.

    Teacher vectors have length M, student vectors length N; each vector
    is a probability vector (positive, sums to 1).
    """

    attn_teacher: np.ndarray
    attn_student: np.ndarray
    hidden_teacher: np.ndarray
    hidden_student: np.ndarray

    @classmethod
    def uniform(cls, num_teacher_layers: int, num_student_layers: int) -> "LayerWeights":
        t = np.full(num_teacher_layers, 1.0 / num_teacher_layers)
        s = np.full(num_student_layers, 1.0 / num_student_layers)
        return cls(t.copy(), s.copy(), t.copy(), s.copy())

    def validate(self):
        for name in ("attn_teacher", "attn_student", "hidden_teacher", "hidden_student"):
            v = getattr(self, name)
            if np.any(v <= 0):
                raise ParameterError(f"{name} has non-positive entries")
            if abs(v.sum() - 1.0) > 1e-9:
                raise ParameterError(f"{name} does not sum to 1")


class Projections:
    """Learnable maps from student activation width d to teacher width d'."""

    def __init__(self, student_hidden: int, teacher_hidden: int, seed: int = 0,
                 identity: bool = False):
        from .tensor import Parameter

        if identity:
            if student_hidden != teacher_hidden:
                raise DimensionError("identity projection needs equal hidden sizes")
            we = np.eye(student_hidden)
            wh = np.eye(student_hidden)
        else:
            rng = np.random.default_rng(seed)
            we = rng.normal(0.0, 0.02, size=(student_hidden, teacher_hidden))
            wh = rng.normal(0.0, 0.02, size=(student_hidden, teacher_hidden))
        self.emb = Parameter(we, "proj.emb")
        self.hidden = Parameter(wh, "proj.hidden")

    def parameters(self):
        return [self.emb, self.hidden]


@dataclass
class DistillLossBreakdown:
    emb: Tensor
    pred: Tensor
    attn: Tensor
    hidden: Tensor
    total: Tensor
    attn_flow: FlowMatrix | None = None
    hidden_flow: FlowMatrix | None = None
    attn_cost: np.ndarray | None = None
    hidden_cost: np.ndarray | None = None


def _as_batch(traces):
    return traces if isinstance(traces, (list, tuple)) else [traces]


def _mean_tensors(ts):
    total = ts[0]
    for t in ts[1:]:
        total = T.add(total, t)
    return T.scale(total, 1.0 / len(ts))


def embedding_loss(student_trace, teacher_trace, proj: Projections) -> Tensor:
    """MSE between projected student embeddings and teacher embeddings."""
    per_example = []
    for st, tt in zip(_as_batch(student_trace), _as_batch(teacher_trace)):
        if st.embeddings.shape[0] != tt.embeddings.shape[0]:
            raise DimensionError(
                f"sequence length mismatch: {st.embeddings.shape} vs "
                f"{tt.embeddings.shape}"
            )
        per_example.append(
            T.mse(T.matmul(st.embeddings, proj.emb.tensor), tt.embeddings)
        )
    return _mean_tensors(per_example)


def prediction_loss(student_logits, teacher_logits, temperature: float) -> Tensor:
    """Soft cross-entropy from teacher logits to tempered student logits.

    The temperature divides the student logits only; teacher
    probabilities are plain softmax and carry no gradient.
    """
    t = float(temperature)
    if t <= 0:
        raise ParameterError(f"temperature must be positive, got {t}")
    s_batch = _as_batch(student_logits)
    t_batch = _as_batch(teacher_logits)
    per_example = []
    for zs, zt in zip(s_batch, t_batch):
        if zs.shape != zt.shape:
            raise DimensionError(f"class count mismatch: {zs.shape} vs {zt.shape}")
        soft_teacher = Tensor(_softmax_np(zt.data))  # constant target
        picked = T.mul(T.log_softmax_row(zs, t=t), soft_teacher)
        per_example.append(T.scale(T.tsum(picked), -1.0))
    return _mean_tensors(per_example)


def _softmax_np(z, tau=1.0):
    z = np.asarray(z, np.float64) / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def attention_distance_matrix(student_trace, teacher_trace):
    """Pairwise MSE between attention scores: entry (i, j) compares
    teacher layer i with student layer j. Returns an M x N grid of
    scalar tensors (batch-averaged)."""
    s_batch = _as_batch(student_trace)
    t_batch = _as_batch(teacher_trace)
    m = len(t_batch[0].attention_scores)
    n = len(s_batch[0].attention_scores)
    for st, tt in zip(s_batch, t_batch):
        sa, ta = st.attention_scores[0], tt.attention_scores[0]
        if sa.shape[0] != ta.shape[0]:
            raise DimensionError(
                f"head count mismatch: student {sa.shape[0]} vs teacher {ta.shape[0]}"
            )
    grid = []
    for i in range(m):
        row = []
        for j in range(n):
            per_example = [
                T.mse(st.attention_scores[j], tt.attention_scores[i])
                for st, tt in zip(s_batch, t_batch)
            ]
            row.append(_mean_tensors(per_example))
        grid.append(row)
    return grid


def hidden_distance_matrix(student_trace, teacher_trace, proj: Projections):
    """Pairwise MSE between projected student and teacher hidden states;
    entry (i, j) compares teacher layer i with student layer j."""
    s_batch = _as_batch(student_trace)
    t_batch = _as_batch(teacher_trace)
    m = len(t_batch[0].hidden_states)
    n = len(s_batch[0].hidden_states)
    grid = []
    projected = [
        [T.matmul(h, proj.hidden.tensor) for h in st.hidden_states] for st in s_batch
    ]
    for st_proj, tt in zip(projected, t_batch):
        if st_proj[0].shape != tt.hidden_states[0].shape:
            raise DimensionError(
                f"projected hidden shape {st_proj[0].shape} vs teacher "
                f"{tt.hidden_states[0].shape}"
            )
    for i in range(m):
        row = []
        for j in range(n):
            per_example = [
                T.mse(st_proj[j], tt.hidden_states[i])
                for st_proj, tt in zip(projected, t_batch)
            ]
            row.append(_mean_tensors(per_example))
        grid.append(row)
    return grid


def matrix_values(grid) -> np.ndarray:
    """Detach an M x N grid of scalar tensors into a numpy matrix."""
    return np.array([[cell.item() for cell in row] for row in grid])


def emd_layer_loss(distance_grid, teacher_weights, student_weights,
                   flow: FlowMatrix | None = None) -> tuple[Tensor, FlowMatrix]:
    """EMD over a distance grid with the given layer weights.

    Solves the transportation problem on the detached distances (teacher
    weights as supplies, student weights as demands), then rebuilds the
    normalized work as a tensor expression with the flow held constant.
    Pass `flow` to skip the solve (used by gradient tests).
    """
    dvals = matrix_values(distance_grid)
    problem = TransportProblem(teacher_weights, student_weights, dvals)
    if flow is None:
        flow = solve(problem)
    terms = []
    for i, row in enumerate(distance_grid):
        for j, cell in enumerate(row):
            f = flow.flow[i, j]
            if f != 0.0:
                terms.append(T.scale(cell, f))
    if not terms:
        terms = [Tensor(0.0)]
    loss = T.scale(_sum_tensors(terms), 1.0 / flow.total_flow)
    return loss, flow


def _sum_tensors(ts):
    total = ts[0]
    for t in ts[1:]:
        total = T.add(total, t)
    return total


def mean_pairwise_loss(distance_grid) -> Tensor:
    """Unweighted mean of all M x N pairwise distances (EMD ablation)."""
    return T.scale(
        _sum_tensors([cell for row in distance_grid for cell in row]),
        1.0 / (len(distance_grid) * len(distance_grid[0])),
    )


def one_to_one_components(student_trace, teacher_trace, proj: Projections):
    """Skip-mapping baseline: student layer j learns from teacher layer
    j * (M / N). Returns (attention part, hidden part)."""
    s_batch = _as_batch(student_trace)
    t_batch = _as_batch(teacher_trace)
    m = len(t_batch[0].attention_scores)
    n = len(s_batch[0].attention_scores)
    if m % n != 0:
        raise DimensionError(f"{m} teacher layers not divisible by {n} student layers")
    stride = m // n
    attn_terms = []
    hidden_terms = []
    for j in range(n):
        i = (j + 1) * stride - 1  # 1-based teacher index (j+1)*(M/N)
        attn_terms.append(
            _mean_tensors(
                [
                    T.mse(st.attention_scores[j], tt.attention_scores[i])
                    for st, tt in zip(s_batch, t_batch)
                ]
            )
        )
        hidden_terms.append(
            _mean_tensors(
                [
                    T.mse(
                        T.matmul(st.hidden_states[j], proj.hidden.tensor),
                        tt.hidden_states[i],
                    )
                    for st, tt in zip(s_batch, t_batch)
                ]
            )
        )
    return _mean_tensors(attn_terms), _mean_tensors(hidden_terms)


def one_to_one_baseline_loss(student_trace, teacher_trace, proj: Projections) -> Tensor:
    attn, hidden = one_to_one_components(student_trace, teacher_trace, proj)
    return T.add(attn, hidden)


def cost_attention_update(attn_flow: FlowMatrix, attn_cost: np.ndarray,
                          hidden_flow: FlowMatrix, hidden_cost: np.ndarray,
                          weights: LayerWeights, temperature: float) -> LayerWeights:
    """Re-learn layer weights from the batch's flows and costs.

    Each layer's unit transferring cost is its incurred transport cost
    divided by its weight; the new pre-softmax score is the inverse
    ratio against the summed unit costs; attention and hidden softmaxes
    (smoothed by the temperature) are averaged and assigned to both
    vectors for the next batch. Teacher and student sides are updated
    symmetrically (row sums vs column sums).
    """
    tau = float(temperature)
    if tau <= 0:
        raise ParameterError(f"temperature must be positive, got {tau}")

    def side(axis, w_attn, w_hidden):
        ca = (attn_cost * attn_flow.flow).sum(axis=axis) / w_attn
        ch = (hidden_cost * hidden_flow.flow).sum(axis=axis) / w_hidden
        ca = np.maximum(ca, _UNIT_COST_FLOOR)
        ch = np.maximum(ch, _UNIT_COST_FLOOR)
        score_a = ca.sum() / ca
        score_h = ch.sum() / ch
        w = 0.5 * (_softmax_np(score_a, tau) + _softmax_np(score_h, tau))
        # keep every weight strictly positive despite exp underflow
        w = np.maximum(w, 1e-16)
        return w / w.sum()

    teacher = side(1, weights.attn_teacher, weights.hidden_teacher)
    student = side(0, weights.attn_student, weights.hidden_student)
    updated = LayerWeights(
        attn_teacher=teacher.copy(),
        attn_student=student.copy(),
        hidden_teacher=teacher.copy(),
        hidden_student=student.copy(),
    )
    updated.validate()
    return updated


def total_loss(student_traces, teacher_traces, proj: Projections,
               weights: LayerWeights, beta: float, t: float,
               tau: float = 1.0, mode: str = "full") -> DistillLossBreakdown:
    """Combined objective: beta * (emb + attn + hidden) + pred.

    `tau` is carried for the caller's subsequent cost-attention update
    and does not affect the loss itself. Modes: "full" and "no_ca" use
    the transport losses (no_ca differs only in never updating weights);
    "no_emd" replaces them with the mean of all pairwise distances;
    "one_to_one" uses the skip mapping.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    s_batch = _as_batch(student_traces)
    t_batch = _as_batch(teacher_traces)
    emb = embedding_loss(s_batch, t_batch, proj)
    pred = prediction_loss(
        [st.logits for st in s_batch], [tt.logits for tt in t_batch], t
    )
    attn_flow = hidden_flow = None
    attn_cost = hidden_cost = None
    if mode == "one_to_one":
        attn, hidden = one_to_one_components(s_batch, t_batch, proj)
    else:
        attn_grid = attention_distance_matrix(s_batch, t_batch)
        hidden_grid = hidden_distance_matrix(s_batch, t_batch, proj)
        attn_cost = matrix_values(attn_grid)
        hidden_cost = matrix_values(hidden_grid)
        if mode == "no_emd":
            attn = mean_pairwise_loss(attn_grid)
            hidden = mean_pairwise_loss(hidden_grid)
        else:
            attn, attn_flow = emd_layer_loss(
                attn_grid, weights.attn_teacher, weights.attn_student
            )
            hidden, hidden_flow = emd_layer_loss(
                hidden_grid, weights.hidden_teacher, weights.hidden_student
            )
    total = T.add(T.scale(T.add(T.add(emb, attn), hidden), float(beta)), pred)
    return DistillLossBreakdown(
        emb=emb, pred=pred, attn=attn, hidden=hidden, total=total,
        attn_flow=attn_flow, hidden_flow=hidden_flow,
        attn_cost=attn_cost, hidden_cost=hidden_cost,
    )
