import numpy as np
import pytest

from evdance import autodiff as ad
from evdance import clip_bridge, losses
from evdance.adaptation import (
    TARGET_KINDS,
    AdaptConfig,
    FeatureProviders,
    forward_components,
    init_state,
    prepare_streams,
)
from evdance.clip_bridge import PrecomputedEmbedder, TextFeatureBank, gram_softmax, loss_pkd, loss_vkd
from evdance.errors import NotADistribution, NotScalar, ShapeMismatch
from evdance.models import Classifier, ClassifierConfig, ReconConfig, ReconstructionNet
from evdance.synthetic import synthesize_dataset

SEEDS = range(20)
TOL = 1e-3


def param(rng, *shape, away_from_zero=False):
    v = rng.normal(size=shape)
    if away_from_zero:  # keep ReLU inputs clear of the kink
        v = np.sign(v) * (0.2 + np.abs(v))
    return ad.Parameter(v, "p")


def dist_rows(rng, n, k):
    return ad.softmax_rows(rng.normal(size=(n, k))).values


def op_cases(rng):
    """(name, loss builder, params) for every primitive op."""
    a, b = param(rng, 3, 4), param(rng, 3, 4)
    row, col = param(rng, 4), param(rng, 3, 1)
    pos = ad.Parameter(rng.uniform(0.5, 2.0, size=(3, 4)), "pos")
    r = param(rng, 3, 4, away_from_zero=True)
    m1, m2 = param(rng, 3, 5), param(rng, 5, 2)
    x, W, bias = param(rng, 4, 3), param(rng, 3, 2), param(rng, 2)
    w_out = rng.normal(size=(3, 4))  # random projection so sums are not trivial
    labels = rng.integers(0, 4, size=3)
    target = rng.normal(size=(3, 4))
    p_fixed = dist_rows(rng, 3, 4)

    def proj(t):
        return ad.tsum(ad.mul(t, w_out))

    return [
        ("add", lambda: proj(ad.add(a, row)), [a, row]),
        ("sub", lambda: proj(ad.sub(col, b)), [col, b]),
        ("mul", lambda: proj(ad.mul(a, b)), [a, b]),
        ("div", lambda: proj(ad.div(a, pos)), [a, pos]),
        ("exp", lambda: proj(ad.exp(a)), [a]),
        ("log", lambda: proj(ad.log(pos)), [pos]),
        ("relu", lambda: proj(ad.relu(r)), [r]),
        ("sigmoid", lambda: proj(ad.sigmoid(a)), [a]),
        ("transpose", lambda: proj(ad.transpose(ad.transpose(a))), [a]),
        ("reshape", lambda: proj(ad.reshape(ad.reshape(a, (4, 3)), (3, 4))), [a]),
        ("take_rows", lambda: proj(ad.take_rows(a, [2, 0, 2])), [a]),
        ("concat_rows", lambda: ad.tsum(ad.mul(ad.concat_rows([a, b]), np.vstack([w_out, w_out]))), [a, b]),
        ("sum_axis", lambda: ad.tsum(ad.mul(ad.tsum(a, axis=1), np.arange(3.0))), [a]),
        ("mean", lambda: ad.mean(ad.mul(a, a)), [a]),
        ("matmul", lambda: ad.tsum(ad.mul(ad.matmul(m1, m2), rng_fixed(3, 2))), [m1, m2]),
        ("linear", lambda: ad.tsum(ad.mul(ad.linear(x, W, bias), rng_fixed(4, 2))), [x, W, bias]),
        ("normalize_rows", lambda: proj(ad.normalize_rows(a)), [a]),
        ("softmax_rows", lambda: proj(ad.softmax_rows(a)), [a]),
        ("log_softmax_rows", lambda: proj(ad.log_softmax_rows(a)), [a]),
        ("kl_rows", lambda: ad.kl_rows(ad.softmax_rows(a), ad.log_softmax_rows(b)), [a, b]),
        ("kl_rows_const_p", lambda: ad.kl_rows(p_fixed, ad.log_softmax_rows(b)), [b]),
        ("entropy_rows", lambda: ad.entropy_rows(ad.softmax_rows(a)), [a]),
        ("mse", lambda: ad.mse(a, target), [a]),
        ("cross_entropy", lambda: ad.cross_entropy(a, labels), [a]),
    ]


_FIXED = np.random.default_rng(12345)
_FIXED_MATS = {}


def rng_fixed(*shape):
    if shape not in _FIXED_MATS:
        _FIXED_MATS[shape] = _FIXED.normal(size=shape)
    return _FIXED_MATS[shape]


OP_NAMES = [name for name, _, _ in op_cases(np.random.default_rng(0))]


@pytest.mark.parametrize("name", OP_NAMES)
def test_op_gradients(name):
    worst = 0.0
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        case = {n: (f, ps) for n, f, ps in op_cases(rng)}[name]
        worst = max(worst, ad.grad_check(case[0], case[1], eps=1e-4, rng=rng))
    assert worst < TOL, f"{name}: {worst:.2e}"


def loss_cases(rng):
    n, k, d = 5, 4, 6
    anchor, o1, o2 = param(rng, n, k), param(rng, n, k), param(rng, n, k)
    t1, t2, t3 = param(rng, n, k), param(rng, n, k), param(rng, n, k)
    feats = param(rng, n, d)
    vis = rng.normal(size=(n, 8))
    teacher = rng.normal(size=(n, k))
    # non-orthonormal bank so the prediction-level term is not identically zero
    bank = TextFeatureBank(rng.normal(size=(k, d)), [f"c{i}" for i in range(k)])
    return [
        ("L_R", lambda: losses.loss_r(anchor), [anchor]),
        ("L_TC", lambda: losses.loss_tc(anchor, [o1, o2]), [anchor, o1, o2]),
        ("L_EN", lambda: losses.loss_en([t1, t2, t3]), [t1, t2, t3]),
        ("L_PC", lambda: losses.loss_pc([t1, t2, t3]), [t1, t2, t3]),
        ("L_Sup", lambda: losses.loss_sup(t1, teacher), [t1]),
        ("gram_softmax", lambda: ad.tsum(ad.mul(gram_softmax(feats, 0.7), rng_fixed(n, n))), [feats]),
        ("L_VKD", lambda: loss_vkd(feats, vis, 0.5), [feats]),
        ("L_PKD", pkd_with_frozen_teacher(t1, bank), [t1]),
    ]


def pkd_with_frozen_teacher(logits, bank):
    """loss_pkd with its gradient-stopped teacher held at the unperturbed value."""
    z = ad.softmax_rows(logits.values).values @ bank.features
    teacher = clip_bridge._teacher_log_gram(z, 1.0)
    return lambda: ad.kl_rows(gram_softmax(ad.normalize_rows(ad.softmax_rows(logits))), teacher)


LOSS_NAMES = [name for name, _, _ in loss_cases(np.random.default_rng(0))]


@pytest.mark.parametrize("name", LOSS_NAMES)
def test_loss_gradients(name):
    worst = 0.0
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        case = {n: (f, ps) for n, f, ps in loss_cases(rng)}[name]
        worst = max(worst, ad.grad_check(case[0], case[1], eps=1e-4, rng=rng))
    assert worst < TOL, f"{name}: {worst:.2e}"


def test_pkd_student_side_matches_library():
    rng = np.random.default_rng(3)
    logits = rng.normal(size=(5, 4))
    bank = TextFeatureBank(rng.normal(size=(4, 6)), list("abcd"))
    ours = pkd_with_frozen_teacher(ad.Tensor(logits), bank)().item()
    assert ours == pytest.approx(loss_pkd(ad.softmax_rows(logits), bank).item(), abs=1e-15)


# --- full objective on a 4-stream batch ------------------------------------

class _Replay:
    """Record a gradient-stopped input on the first call, replay it afterwards."""

    def __init__(self):
        self.saved, self.i, self.recording = [], 0, True

    def value(self, v):
        if self.recording:
            self.saved.append(np.array(v, copy=True))
            return v
        out = self.saved[self.i]
        self.i += 1
        return out

    def rewind(self):
        self.recording, self.i = False, 0


KINK_MARGIN = 1e-3  # ten times eps: a central difference cannot straddle a ReLU kink


def relu_margin(build) -> float:
    """Smallest |pre-activation| over every ReLU recorded while building the loss."""
    ad.active_tape().clear()
    build()
    pre = [r.inputs[0].values for r in ad.active_tape().records if r.op == "relu"]
    ad.active_tape().clear()
    return min(float(np.abs(v).min()) for v in pre)


def move_off_kinks(params, build, rng):
    # zero-initialised biases meet all-zero input rows exactly at the kink
    for _ in range(100):
        for p in params:
            p.values += rng.normal(0.0, 0.05, size=p.shape)
        if relu_margin(build) > KINK_MARGIN:
            return
    raise AssertionError("no kink-free evaluation point found")


def make_small_batch():
    ds = synthesize_dataset(seed=5, k=4, streams_per_class=1, width=6, height=6,
                            events_per_stream=120, test_per_class=1)
    cfg = AdaptConfig(windows=3, bins=2, count_threshold=60, target_hidden=[6], source_hidden=[6],
                      recon_hidden=[8], stub_feature_dim=5)
    streams = ds.split_streams("train")
    ids = [e.path for e in ds.manifest.split("train")]
    return cfg, prepare_streams(streams, cfg, ids), ds.manifest.classes


@pytest.fixture(scope="module")
def small_batch():
    return make_small_batch()


def full_objective_worst(small_batch, monkeypatch):
    """Largest grad-check error of L_all over all seeds, stop-gradient teachers frozen."""
    cfg, batch, classes = small_batch
    worst = 0.0
    for seed in SEEDS:
        rng = np.random.default_rng([seed, 77])
        recon = ReconstructionNet(ReconConfig(batch.height, batch.width, cfg.bins, cfg.recon_hidden), seed=seed)
        source = Classifier(ClassifierConfig(batch.height * batch.width, cfg.source_hidden, 4), seed=seed + 100)
        state = init_state(recon, source, cfg.replace(seed=seed), {k: batch.reps[k].shape[1] for k in TARGET_KINDS})
        features = FeatureProviders(
            TextFeatureBank(rng.normal(size=(4, 5)), list(classes)),
            PrecomputedEmbedder(rng.normal(size=(len(batch), 5)), batch.ids))

        replay = _Replay()
        orig_sup, orig_teacher = losses.loss_sup, clip_bridge._teacher_log_gram
        monkeypatch.setattr("evdance.adaptation.loss_sup",
                            lambda t, s: orig_sup(t, replay.value(s.values)))
        monkeypatch.setattr(clip_bridge, "_teacher_log_gram",
                            lambda f, tau: orig_teacher(replay.value(f), tau))

        def f():
            if replay.saved:
                replay.rewind()
            comps = forward_components(state, batch, cfg, features, routed=False)
            assert set(comps) == set(losses.TERMS)
            return losses.loss_all(comps)[0]

        move_off_kinks(state.all_params(), lambda: forward_components(state, batch, cfg, features, routed=False), rng)
        replay.saved.clear()
        replay.recording = True
        worst = max(worst, ad.grad_check(f, state.all_params(), eps=1e-4, coords_per_param=3, rng=rng))
        monkeypatch.undo()
    return worst


def test_full_objective_gradients(small_batch, monkeypatch):
    worst = full_objective_worst(small_batch, monkeypatch)
    assert worst < TOL, f"full objective: {worst:.2e}"


# --- tape behaviour --------------------------------------------------------

def test_backward_requires_scalar():
    a = ad.Parameter(np.ones((2, 2)))
    with pytest.raises(NotScalar):
        ad.backward(ad.mul(a, 2.0))


def test_no_grad_records_nothing():
    a = ad.Parameter(np.ones(3))
    with ad.no_grad():
        out = ad.tsum(ad.mul(a, a))
    assert not out.tracked


def test_backward_mask_limits_accumulation():
    a, b = ad.Parameter(np.ones(2)), ad.Parameter(np.ones(2))
    ad.backward(ad.tsum(ad.mul(a, b)), mask=[a])
    assert np.array_equal(a.grad, [1.0, 1.0]) and not b.grad.any()


def test_gradients_accumulate_until_zeroed():
    a = ad.Parameter(np.array([2.0]))
    ad.backward(ad.tsum(ad.mul(a, a)))
    ad.backward(ad.tsum(ad.mul(a, a)))
    assert a.grad[0] == 8.0
    a.zero_grad()
    assert a.grad[0] == 0.0


def test_distribution_checks():
    with pytest.raises(NotADistribution):
        ad.entropy_rows(np.array([[0.7, 0.7]]))
    with pytest.raises(ShapeMismatch):
        ad.kl_rows(np.array([[0.5, 0.5]]), np.zeros((1, 3)))


def test_zero_probability_terms_are_finite():
    p = np.array([[1.0, 0.0]])
    assert ad.entropy_rows(p).item() == 0.0
    assert np.isfinite(ad.kl_rows(p, np.log(np.array([[0.5, 0.5]]))).item())


# --- worked values ---------------------------------------------------------

def test_softmax_and_relu_values():
    assert np.allclose(ad.softmax_rows([[0.0, 0.0, 0.0]]).values, 1 / 3, atol=1e-15)
    big = ad.softmax_rows([[1000.0, 0.0]]).values
    assert np.all(np.isfinite(big)) and abs(big[0, 0] - 1.0) <= 1e-12 and big[0, 1] <= 1e-12
    assert ad.relu(np.array([-1.0, 0.0, 2.0])).values.tolist() == [0.0, 0.0, 2.0]
    rows = ad.softmax_rows(np.random.default_rng(0).normal(size=(10, 7)) * 30).values
    assert np.all(np.abs(rows.sum(axis=1) - 1.0) <= 1e-9)


def test_kl_and_entropy_values():
    q = np.log(np.array([[0.25, 0.75]]))
    assert ad.kl_rows([[0.5, 0.5]], q).item() == pytest.approx(0.5 * np.log(2) + 0.5 * np.log(2 / 3), abs=1e-12)
    assert ad.kl_rows([[1.0, 0.0]], np.log([[0.5, 0.5]])).item() == pytest.approx(np.log(2), abs=1e-12)
    p = ad.softmax_rows(np.random.default_rng(1).normal(size=(4, 5))).values
    assert abs(ad.kl_rows(p, np.log(p)).item()) <= 1e-9
    assert ad.entropy_rows([[0.0, 1.0, 0.0]]).item() == 0.0
    assert ad.entropy_rows(np.full((2, 4), 0.25)).item() == pytest.approx(np.log(4), abs=1e-12)
    assert ad.entropy_rows(np.full((1, 10), 0.1)).item() == pytest.approx(np.log(10), abs=1e-12)
    h = ad.entropy_rows(p).item()
    assert 0.0 <= h <= np.log(5)


def test_mse_values():
    assert ad.mse([1.0, 2.0], [1.0, 2.0]).item() == 0.0
    assert ad.mse([0.0], [2.0]).item() == 4.0
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=7), rng.normal(size=7)
    assert ad.mse(a, b).item() == pytest.approx(sum((x - y) ** 2 for x, y in zip(a, b)) / 7, abs=1e-15)


def test_backward_simple_cases():
    p = ad.Parameter(np.random.default_rng(3).normal(size=(2, 3)))
    ad.backward(ad.tsum(p))
    assert np.array_equal(p.grad, np.ones((2, 3)))
    p.zero_grad()
    const = ad.add(ad.mul(p, 0.0), 5.0)
    ad.backward(ad.tsum(const))
    assert not p.grad.any()
    assert ad.grad_check(lambda: ad.Tensor(3.0), [p]) == 0.0


def test_backward_linearity_on_random_graphs():
    rng = np.random.default_rng(4)
    for _ in range(20):
        a, b = ad.Parameter(rng.normal(size=(3, 3))), ad.Parameter(rng.normal(size=(3, 3)))
        f1 = lambda: ad.tsum(ad.mul(ad.matmul(a, b), ad.sigmoid(a)))
        f2 = lambda: ad.entropy_rows(ad.softmax_rows(ad.add(a, b)))
        ad.backward(ad.add(f1(), f2()))
        joint = (a.grad.copy(), b.grad.copy())
        a.zero_grad(), b.zero_grad()
        ad.backward(f1())
        ad.backward(f2())
        assert np.allclose(joint[0], a.grad, atol=1e-12) and np.allclose(joint[1], b.grad, atol=1e-12)
        a.zero_grad(), b.zero_grad()


def test_linear_model_mse_grad_check():
    rng = np.random.default_rng(5)
    W, b = ad.Parameter(rng.normal(size=(5, 4))), ad.Parameter(rng.normal(size=4))
    x, y = rng.normal(size=(3, 5)), rng.normal(size=(3, 4))
    assert ad.grad_check(lambda: ad.mse(ad.linear(x, W, b), y), [W, b], eps=1e-4) < 1e-3
