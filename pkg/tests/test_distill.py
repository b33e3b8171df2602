import numpy as np
import pytest

from emdistill import tensor as T
from emdistill.distill import (
    DistillLossBreakdown,
    LayerWeights,
    Projections,
    attention_distance_matrix,
    cost_attention_update,
    embedding_loss,
    emd_layer_loss,
    hidden_distance_matrix,
    matrix_values,
    mean_pairwise_loss,
    one_to_one_baseline_loss,
    one_to_one_components,
    prediction_loss,
    total_loss,
)
from emdistill.model import ActivationTrace, TransformerModel
from emdistill.tensor import DimensionError, ParameterError, Tensor
from emdistill.transport import FlowMatrix


def leaf_trace(rng, num_layers, heads, seq, hidden, num_classes=2,
               requires_grad=False):
    """A synthetic activation trace built from leaf tensors."""
    return ActivationTrace(
        embeddings=Tensor(rng.normal(size=(seq, hidden)), requires_grad=requires_grad),
        attention_scores=[
            Tensor(rng.normal(size=(heads, seq, seq)), requires_grad=requires_grad)
            for _ in range(num_layers)
        ],
        hidden_states=[
            Tensor(rng.normal(size=(seq, hidden)), requires_grad=requires_grad)
            for _ in range(num_layers)
        ],
        logits=Tensor(rng.normal(size=num_classes), requires_grad=requires_grad),
    )


def trace_leaves(trace):
    return [trace.embeddings, *trace.attention_scores, *trace.hidden_states,
            trace.logits]


def fd_grad(f, x, step=1e-5):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        ix = it.multi_index
        orig = x[ix]
        x[ix] = orig + step
        fp = f()
        x[ix] = orig - step
        fm = f()
        x[ix] = orig
        g[ix] = (fp - fm) / (2 * step)
        it.iternext()
    return g


def max_rel_err(got, want):
    return np.max(np.abs(got - want) / np.maximum(1.0, np.abs(want)))


class TestEmbeddingLoss:
    def test_identity_projection_zero(self):
        rng = np.random.default_rng(0)
        tr = leaf_trace(rng, 1, 1, 4, 6)
        proj = Projections(6, 6, identity=True)
        assert embedding_loss(tr, tr, proj).item() == 0.0

    def test_constant_offset(self):
        rng = np.random.default_rng(1)
        st = leaf_trace(rng, 1, 1, 4, 6)
        proj = Projections(6, 6, identity=True)
        tt = leaf_trace(rng, 1, 1, 4, 6)
        tt.embeddings = Tensor(st.embeddings.data + 2.0)
        assert embedding_loss(st, tt, proj).item() == pytest.approx(4.0, abs=1e-12)

    def test_random_against_flat_loop(self):
        rng = np.random.default_rng(2)
        st = leaf_trace(rng, 1, 1, 3, 4)
        tt = leaf_trace(rng, 1, 1, 3, 5)
        proj = Projections(4, 5, seed=7)
        projected = st.embeddings.data @ proj.emb.data
        want = np.mean((projected - tt.embeddings.data) ** 2)
        assert embedding_loss(st, tt, proj).item() == pytest.approx(want, rel=1e-13)

    def test_length_mismatch(self):
        rng = np.random.default_rng(3)
        st = leaf_trace(rng, 1, 1, 3, 4)
        tt = leaf_trace(rng, 1, 1, 5, 4)
        with pytest.raises(DimensionError):
            embedding_loss(st, tt, Projections(4, 4, identity=True))


class TestPredictionLoss:
    def test_uniform_entropy(self):
        z = Tensor([0.0, 0.0])
        assert prediction_loss(z, z, 1.0).item() == pytest.approx(np.log(2), abs=1e-12)

    def test_near_deterministic(self):
        z = Tensor([20.0, -20.0])
        assert prediction_loss(z, z, 1.0).item() < 1e-8

    def test_cross_pair_with_temperature(self):
        zs, zt = Tensor([0.0, 1.0]), Tensor([1.0, 0.0])
        got = prediction_loss(zs, zt, 2.0).item()
        # -softmax([1,0]) . log_softmax([0, 0.5])
        pt = np.exp([1.0, 0.0]) / np.exp([1.0, 0.0]).sum()
        ls = np.array([0.0, 0.5]) - np.log(np.exp(0.0) + np.exp(0.5))
        assert got == pytest.approx(-(pt * ls).sum(), abs=1e-9)
        assert got == pytest.approx(0.83961, abs=1e-5)

    def test_bad_temperature(self):
        with pytest.raises(ParameterError):
            prediction_loss(Tensor([0.0]), Tensor([0.0]), 0.0)


class TestDistanceMatrices:
    def test_attention_zero_on_identical_layers(self):
        rng = np.random.default_rng(4)
        tt = leaf_trace(rng, 3, 2, 4, 6)
        st = leaf_trace(rng, 2, 2, 4, 6)
        st.attention_scores[1] = Tensor(tt.attention_scores[0].data.copy())
        grid = matrix_values(attention_distance_matrix(st, tt))
        assert grid.shape == (3, 2)
        assert grid[0, 1] == 0.0

    def test_attention_constant_offset(self):
        rng = np.random.default_rng(5)
        tt = leaf_trace(rng, 3, 2, 4, 6)
        st = leaf_trace(rng, 2, 2, 4, 6)
        st.attention_scores = [
            Tensor(tt.attention_scores[i].data + 0.5) for i in range(2)
        ]
        # only entries where student j derives from teacher j are offset
        grid = matrix_values(attention_distance_matrix(st, tt))
        assert grid[0, 0] == pytest.approx(0.25, abs=1e-12)
        assert grid[1, 1] == pytest.approx(0.25, abs=1e-12)

    def test_attention_random_flat_loop(self):
        rng = np.random.default_rng(6)
        tt = leaf_trace(rng, 3, 2, 4, 6)
        st = leaf_trace(rng, 2, 2, 4, 6)
        grid = matrix_values(attention_distance_matrix(st, tt))
        for i in range(3):
            for j in range(2):
                want = np.mean(
                    (st.attention_scores[j].data - tt.attention_scores[i].data) ** 2
                )
                assert grid[i, j] == pytest.approx(want, rel=1e-13)

    def test_attention_head_mismatch(self):
        rng = np.random.default_rng(7)
        tt = leaf_trace(rng, 2, 4, 4, 8)
        st = leaf_trace(rng, 2, 2, 4, 8)
        with pytest.raises(DimensionError):
            attention_distance_matrix(st, tt)

    def test_hidden_identity_zero(self):
        rng = np.random.default_rng(8)
        tr = leaf_trace(rng, 2, 2, 4, 6)
        grid = matrix_values(
            hidden_distance_matrix(tr, tr, Projections(6, 6, identity=True))
        )
        assert np.allclose(np.diag(grid), 0.0, atol=1e-15)

    def test_hidden_zero_projection_zero_teacher(self):
        rng = np.random.default_rng(9)
        st = leaf_trace(rng, 2, 2, 4, 6)
        tt = leaf_trace(rng, 2, 2, 4, 6)
        for i in range(2):
            tt.hidden_states[i] = Tensor(np.zeros((4, 6)))
        proj = Projections(6, 6, identity=True)
        proj.hidden.tensor.data[...] = 0.0
        grid = matrix_values(hidden_distance_matrix(st, tt, proj))
        assert np.array_equal(grid, np.zeros((2, 2)))

    def test_hidden_random_flat_loop(self):
        rng = np.random.default_rng(10)
        tt = leaf_trace(rng, 3, 2, 4, 8)
        st = leaf_trace(rng, 2, 2, 4, 6)
        proj = Projections(6, 8, seed=1)
        grid = matrix_values(hidden_distance_matrix(st, tt, proj))
        for i in range(3):
            for j in range(2):
                want = np.mean(
                    (st.hidden_states[j].data @ proj.hidden.data
                     - tt.hidden_states[i].data) ** 2
                )
                assert grid[i, j] == pytest.approx(want, rel=1e-12)


def scalar_grid(values):
    return [[Tensor(float(v)) for v in row] for row in values]


class TestEmdLayerLoss:
    def test_zero_diagonal(self):
        d = np.ones((3, 3)) - np.eye(3)
        w = LayerWeights.uniform(3, 3)
        loss, flow = emd_layer_loss(scalar_grid(d), w.attn_teacher, w.attn_student)
        assert loss.item() == pytest.approx(0.0, abs=1e-12)
        assert np.allclose(flow.flow, np.eye(3) / 3, atol=1e-9)

    def test_single_pair(self):
        loss, _ = emd_layer_loss(scalar_grid([[0.42]]), np.ones(1), np.ones(1))
        assert loss.item() == pytest.approx(0.42, abs=1e-12)

    def test_3x2_instance(self):
        d = [[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]
        w = LayerWeights.uniform(3, 2)
        loss, _ = emd_layer_loss(scalar_grid(d), w.attn_teacher, w.attn_student)
        assert loss.item() == pytest.approx(3.5, abs=1e-12)

    def test_bounded_by_matrix_extremes(self):
        rng = np.random.default_rng(11)
        for _ in range(25):
            m, n = rng.integers(1, 5), rng.integers(1, 5)
            d = rng.uniform(0.0, 3.0, size=(m, n))
            w = LayerWeights.uniform(int(m), int(n))
            loss, _ = emd_layer_loss(scalar_grid(d), w.attn_teacher, w.attn_student)
            assert d.min() - 1e-9 <= loss.item() <= d.max() + 1e-9


class TestCostAttention:
    def make_inputs(self, attn_unit, hidden_unit=None):
        """N=1 student makes the flow forced, so teacher unit costs equal
        the cost column entries."""
        attn_unit = np.asarray(attn_unit, np.float64)
        hidden_unit = attn_unit if hidden_unit is None else np.asarray(hidden_unit)
        m = attn_unit.size
        w = LayerWeights.uniform(m, 1)
        flow = FlowMatrix(w.attn_teacher.reshape(m, 1).copy(), 0.0, 1.0)
        return (flow, attn_unit.reshape(m, 1), flow, hidden_unit.reshape(m, 1), w)

    def test_equal_unit_costs_give_uniform(self):
        flow_a, ca, flow_h, ch, w = self.make_inputs([2.0, 2.0, 2.0])
        out = cost_attention_update(flow_a, ca, flow_h, ch, w, 1.0)
        assert np.array_equal(out.attn_teacher, np.full(3, 1 / 3))
        assert np.array_equal(out.hidden_teacher, np.full(3, 1 / 3))
        assert np.array_equal(out.attn_student, np.ones(1))

    def test_high_temperature_limit(self):
        rng = np.random.default_rng(12)
        flow_a, ca, flow_h, ch, w = self.make_inputs(rng.uniform(0.5, 5.0, size=4))
        out = cost_attention_update(flow_a, ca, flow_h, ch, w, 1e6)
        assert np.max(np.abs(out.attn_teacher - 0.25)) < 1e-3

    def test_worked_example(self):
        flow_a, ca, flow_h, ch, w = self.make_inputs([1.0, 3.0])
        out = cost_attention_update(flow_a, ca, flow_h, ch, w, 1.0)
        # inverse-ratio scores [4, 4/3]; softmax -> [0.93503, 0.06497]
        assert out.attn_teacher == pytest.approx([0.93503, 0.06497], abs=1e-4)
        assert np.array_equal(out.attn_teacher, out.hidden_teacher)

    def test_vectors_remain_probabilities(self):
        rng = np.random.default_rng(13)
        for _ in range(50):
            m = int(rng.integers(2, 6))
            flow_a, ca, flow_h, ch, w = self.make_inputs(
                rng.uniform(0.0, 4.0, size=m), rng.uniform(0.0, 4.0, size=m)
            )
            out = cost_attention_update(flow_a, ca, flow_h, ch, w, 1.0)
            for v in (out.attn_teacher, out.attn_student,
                      out.hidden_teacher, out.hidden_student):
                assert np.all(v > 0)
                assert abs(v.sum() - 1.0) < 1e-9

    def test_monotonicity(self):
        rng = np.random.default_rng(14)
        for _ in range(100):
            m = int(rng.integers(2, 6))
            unit = rng.uniform(0.5, 4.0, size=m)
            i = int(rng.integers(m))
            flow_a, ca, flow_h, ch, w = self.make_inputs(unit)
            before = cost_attention_update(flow_a, ca, flow_h, ch, w, 1.0)
            lowered = unit.copy()
            lowered[i] *= rng.uniform(0.2, 0.9)
            flow_a, ca, flow_h, ch, w = self.make_inputs(lowered)
            after = cost_attention_update(flow_a, ca, flow_h, ch, w, 1.0)
            assert after.attn_teacher[i] > before.attn_teacher[i]

    def test_zero_unit_cost_handled(self):
        flow_a, ca, flow_h, ch, w = self.make_inputs([0.0, 1.0])
        out = cost_attention_update(flow_a, ca, flow_h, ch, w, 1.0)
        # the perfectly matched layer gets (almost) all the weight
        assert out.attn_teacher[0] > 0.99
        assert abs(out.attn_teacher.sum() - 1.0) < 1e-9

    def test_bad_temperature(self):
        flow_a, ca, flow_h, ch, w = self.make_inputs([1.0, 2.0])
        with pytest.raises(ParameterError):
            cost_attention_update(flow_a, ca, flow_h, ch, w, 0.0)


class TestOneToOne:
    def test_equal_layer_counts_use_diagonal(self):
        rng = np.random.default_rng(15)
        tt = leaf_trace(rng, 2, 2, 4, 6)
        st = leaf_trace(rng, 2, 2, 4, 6)
        proj = Projections(6, 6, identity=True)
        attn, hidden = one_to_one_components(st, tt, proj)
        agrid = matrix_values(attention_distance_matrix(st, tt))
        hgrid = matrix_values(hidden_distance_matrix(st, tt, proj))
        assert attn.item() == pytest.approx(np.diag(agrid).mean(), rel=1e-12)
        assert hidden.item() == pytest.approx(np.diag(hgrid).mean(), rel=1e-12)

    def test_skip_indices_4_to_2(self):
        rng = np.random.default_rng(16)
        tt = leaf_trace(rng, 4, 2, 4, 6)
        st = leaf_trace(rng, 2, 2, 4, 6)
        # make student layer 1 match teacher layer 2 and student 2 match
        # teacher 4 (1-based): the skip loss attention part becomes zero
        st.attention_scores[0] = Tensor(tt.attention_scores[1].data.copy())
        st.attention_scores[1] = Tensor(tt.attention_scores[3].data.copy())
        proj = Projections(6, 6, identity=True)
        attn, _ = one_to_one_components(st, tt, proj)
        assert attn.item() == 0.0

    def test_indivisible_rejected(self):
        rng = np.random.default_rng(17)
        tt = leaf_trace(rng, 3, 2, 4, 6)
        st = leaf_trace(rng, 2, 2, 4, 6)
        with pytest.raises(DimensionError):
            one_to_one_baseline_loss(st, tt, Projections(6, 6, identity=True))

    def test_matches_hand_assembled_selection(self):
        rng = np.random.default_rng(18)
        tt = leaf_trace(rng, 4, 2, 4, 6)
        st = leaf_trace(rng, 2, 2, 4, 6)
        proj = Projections(6, 6, seed=2)
        agrid = matrix_values(attention_distance_matrix(st, tt))
        hgrid = matrix_values(hidden_distance_matrix(st, tt, proj))
        want = (agrid[1, 0] + agrid[3, 1]) / 2 + (hgrid[1, 0] + hgrid[3, 1]) / 2
        got = one_to_one_baseline_loss(st, tt, proj).item()
        assert got == pytest.approx(want, rel=1e-12)


class TestTotalLoss:
    def make_pair(self, seed=19, m=3, n=2, heads=2, seq=4, ds=6, dt=8):
        rng = np.random.default_rng(seed)
        tt = leaf_trace(rng, m, heads, seq, dt)
        st = leaf_trace(rng, n, heads, seq, ds)
        # teacher embeddings must share the student sequence length
        proj = Projections(ds, dt, seed=seed)
        weights = LayerWeights.uniform(m, n)
        return st, tt, proj, weights

    def test_beta_zero_reduces_to_prediction(self):
        st, tt, proj, w = self.make_pair()
        out = total_loss(st, tt, proj, w, beta=0.0, t=1.0)
        assert out.total.item() == prediction_loss(st.logits, tt.logits, 1.0).item()
        assert out.attn.item() > 0  # still computed and reported

    def test_self_distillation_fixed_point(self):
        model = TransformerModel.__new__(TransformerModel)  # placeholder
        from emdistill.model import TransformerConfig
        cfg = TransformerConfig(2, 2, 8, 16, 11, 6, 2, seed=5)
        model = TransformerModel(cfg)
        model.params["cls_w"].tensor.data[...] = 0.0
        model.params["cls_b"].tensor.data[...] = 0.0
        _, trace_s = model.forward([1, 2, 3])
        _, trace_t = model.forward([1, 2, 3])
        proj = Projections(8, 8, identity=True)
        w = LayerWeights.uniform(2, 2)
        out = total_loss(trace_s, trace_t, proj, w, beta=0.5, t=1.0)
        assert out.emb.item() == 0.0
        assert out.attn.item() == 0.0
        assert out.hidden.item() == 0.0
        assert out.total.item() == pytest.approx(np.log(2), abs=1e-12)

    def test_composition_recomputation(self):
        st, tt, proj, w = self.make_pair(seed=20)
        beta = 0.37
        out = total_loss(st, tt, proj, w, beta=beta, t=2.0)
        want = beta * (out.emb.item() + out.attn.item() + out.hidden.item()) \
            + out.pred.item()
        assert out.total.item() == pytest.approx(want, abs=1e-12)

    def test_no_emd_mode(self):
        st, tt, proj, w = self.make_pair(seed=21)
        out = total_loss(st, tt, proj, w, beta=1.0, t=1.0, mode="no_emd")
        agrid = matrix_values(attention_distance_matrix(st, tt))
        assert out.attn.item() == pytest.approx(agrid.mean(), rel=1e-12)
        assert out.attn_flow is None

    def test_no_ca_equals_full_on_first_batch(self):
        st, tt, proj, w = self.make_pair(seed=22)
        a = total_loss(st, tt, proj, w, beta=0.2, t=1.0, mode="full")
        b = total_loss(st, tt, proj, w, beta=0.2, t=1.0, mode="no_ca")
        assert a.total.item() == b.total.item()

    def test_unknown_mode(self):
        st, tt, proj, w = self.make_pair(seed=23)
        with pytest.raises(ValueError):
            total_loss(st, tt, proj, w, beta=1.0, t=1.0, mode="bogus")


class TestGradientContract:
    """Autodiff vs central finite differences with the flow frozen.

    Uses a 2-layer teacher / 1-layer student pair: with a single student
    layer the optimal flow is forced, so re-solving inside the finite
    difference loop cannot change it.
    """

    def setup_method(self):
        rng = np.random.default_rng(24)
        self.tt = leaf_trace(rng, 2, 2, 3, 6)
        self.st = leaf_trace(rng, 1, 2, 3, 4, requires_grad=True)
        self.proj = Projections(4, 6, seed=3)
        self.weights = LayerWeights.uniform(2, 1)

    def check(self, make_loss):
        loss = make_loss()
        T.backward(loss)
        worst = 0.0
        for leaf in trace_leaves(self.st):
            if leaf.grad is None:
                continue
            got = leaf.grad.copy()
            leaf.grad = None
            want = fd_grad(lambda: make_loss().item(), leaf.data)
            worst = max(worst, max_rel_err(got, want))
        assert worst < 1e-4

    def test_embedding_loss(self):
        self.check(lambda: embedding_loss(self.st, self.tt, self.proj))

    def test_prediction_loss(self):
        self.check(lambda: prediction_loss(self.st.logits, self.tt.logits, 1.5))

    def test_attention_emd(self):
        def loss():
            grid = attention_distance_matrix(self.st, self.tt)
            out, _ = emd_layer_loss(
                grid, self.weights.attn_teacher, self.weights.attn_student
            )
            return out

        self.check(loss)

    def test_hidden_emd(self):
        def loss():
            grid = hidden_distance_matrix(self.st, self.tt, self.proj)
            out, _ = emd_layer_loss(
                grid, self.weights.hidden_teacher, self.weights.hidden_student
            )
            return out

        self.check(loss)

    def test_total_loss(self):
        self.check(
            lambda: total_loss(
                self.st, self.tt, self.proj, self.weights, beta=0.3, t=2.0
            ).total
        )
