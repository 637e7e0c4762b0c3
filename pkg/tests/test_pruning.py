import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from winoprune.data import synth_dataset
from winoprune.errors import CapabilityError, InvariantError, NumericError, TrainingError
from winoprune.network import build_network
from winoprune.pruning import (PruneConfig, check_mask, energy, finetune, keep_top_fraction,
                               lift_network, method_b_project, method_b_prune, norm_grad,
                               prune, prune_step, sgd_step, sparsity_report, threshold, train,
                               winograd_l1, zero_mask)
from winoprune.reference import finite_diff_grad
from winoprune.transforms import f2x2_3x3_transforms, lift

T22 = f2x2_3x3_transforms()
SMALL = {"channels": [2, 3]}


class Quadratic:
    """One parameter ``q.w`` with loss 0.5 * (w - 1)^2."""

    def __init__(self, w):
        self.w = np.array([w], dtype=np.float64)

    def params(self):
        return {"q.w": self.w}

    def domain_of(self, key):
        return "dense"

    def loss_and_grads(self, x, y):
        return float(0.5 * (self.w[0] - 1) ** 2), {"q.w": self.w - 1}


def test_energy_examples():
    cfg = PruneConfig(lambdas={"a": 0.5})
    assert energy({"a": np.array([1.0, -2.0])}, 3.0, cfg) == 4.5
    assert energy({"a": np.array([3.0, 4.0])}, 0.0,
                  PruneConfig(lambdas={"a": 1.0}, norms={"a": 2})) == 5.0
    assert energy({"a": np.array([3.0, 4.0])}, 2.5, PruneConfig()) == 2.5
    with pytest.raises(NumericError):
        energy({}, float("inf"), cfg)


def test_l1_subgradient_zero_at_zero():
    np.testing.assert_array_equal(norm_grad(np.array([0.0, -2.0, 3.0]), 1), [0, -1, 1])
    np.testing.assert_array_equal(norm_grad(np.zeros(3), 2), 0)


def test_threshold_examples():
    assert threshold(0.0, 5.0, 1e-4, 0.1) == 0
    assert threshold(9e-4, 0.0, 1e-4, 0.1) == 0
    assert threshold(9e-4, 1.0, 1e-4, 0.1) == 9e-4


@settings(max_examples=100, deadline=None)
@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(-2, 2), st.floats(1e-6, 1e-2),
       st.floats(1e-3, 1))
def test_threshold_monotone_in_magnitude(w, w2, g, eps, beta):
    small, big = sorted([abs(w), abs(w2)])
    if threshold(small, g, eps, beta) != 0:
        assert threshold(big, g, eps, beta) != 0
        assert threshold(-big, g, eps, beta) != 0


def test_config_validation():
    with pytest.raises(ValueError):
        PruneConfig(eps=-1)
    with pytest.raises(ValueError):
        PruneConfig(beta=0)
    with pytest.raises(ValueError):
        PruneConfig(lambdas={"a": -0.1})
    with pytest.raises(ValueError):
        PruneConfig(norms={"a": 3})


def test_prune_step_null_step():
    model = Quadratic(0.37)
    prune_step(model, (None, None), PruneConfig(lr=0.0, eps=1e-300, threshold_layers=("q",)))
    assert model.w[0] == 0.37


def test_prune_step_quadratic_examples():
    model = Quadratic(0.5)
    prune_step(model, (None, None), PruneConfig(lr=0.1, eps=1e-12, threshold_layers=("q",)))
    assert model.w[0] == pytest.approx(0.55, abs=1e-15)

    # w' = 0.9 * (-0.1) + 0.1 = 0.01 and |w'| (|g| + beta) = 0.01 * 1.2 < 0.05
    model = Quadratic(-0.1)
    prune_step(model, (None, None), PruneConfig(lr=0.1, eps=0.05, threshold_layers=("q",)))
    assert model.w[0] == 0.0


def test_prune_step_thresholds_only_regularized_layers_by_default():
    model = Quadratic(-0.1)
    prune_step(model, (None, None), PruneConfig(lr=0.1, eps=0.05))
    assert model.w[0] == pytest.approx(0.01)


def test_prune_step_divergence_reports_step():
    model = Quadratic(1e308)     # the step overflows to inf
    with np.errstate(over="ignore"), pytest.raises(TrainingError, match="step 7"):
        prune_step(model, (None, None), PruneConfig(lr=10.0), step=7)


def _batch(n=16, seed=0):
    data = synth_dataset(seed, n)
    return data.x, data.y


def test_prune_step_with_eps_zero_is_plain_sgd():
    cfg = PruneConfig(eps=0.0, lr=0.05, lambdas={"conv1": 0.01, "conv2": 0.02})
    a = build_network(SMALL, seed=1, domain="winograd")
    b = a.copy()
    batch = _batch()
    prune_step(a, batch, cfg)
    sgd_step(b, batch, cfg)
    for key, w in a.params().items():
        assert np.array_equal(w, b.params()[key])


def test_prune_creates_exact_zeros():
    net = build_network(SMALL, seed=2, domain="winograd")
    cfg = PruneConfig(lr=0.05, eps=1e-2, lambdas={"conv1": 0.05, "conv2": 0.05}, batch_size=8)
    prune(net, synth_dataset(0, 64), cfg, 20, rng=np.random.default_rng(0))
    rep = sparsity_report(net)
    assert rep["density"] < 1.0
    assert rep["nnz"] == sum(np.count_nonzero(l.params["w"]) for l in net.conv_layers())


def test_winograd_l1_unit_kernel_penalty():
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 0, 0] = 1.0
    value, _ = winograd_l1(w, T22)
    assert value == 4.0
    lam = 0.3
    assert lam * value == pytest.approx(lam * 4)


def test_winograd_l1_pullback_matches_finite_differences():
    rng = np.random.default_rng(3)
    checked = 0
    while checked < 5:
        w = rng.normal(size=(2, 2, 3, 3))
        if np.min(np.abs(lift(w, T22))) < 1e-3:     # keep the FD stencil off the kinks
            continue
        checked += 1
        _, grad = winograd_l1(w, T22)
        fd = finite_diff_grad(lambda v: winograd_l1(v, T22)[0], w)
        # exact zeros in the pullback meet FD rounding noise, so scale by the tensor
        assert np.max(np.abs(grad - fd)) / np.max(np.abs(grad)) < 1e-6


def test_lambda_zero_spatial_training_is_ordinary_sgd():
    a = build_network(SMALL, seed=4)
    b = a.copy()
    data = synth_dataset(0, 32)
    cfg = PruneConfig(lr=0.05, batch_size=8)
    train(a, data, cfg, 3, penalty="winograd_l1", rng=np.random.default_rng(1))
    train(b, data, cfg, 3, penalty="none", rng=np.random.default_rng(1))
    for key, w in a.params().items():
        assert np.array_equal(w, b.params()[key])


def test_lift_network_preserves_function():
    net = build_network(SMALL, seed=5)
    lifted = lift_network(net)
    x = synth_dataset(1, 16).x
    assert np.max(np.abs(net.forward(x) - lifted.forward(x))) < 1e-10
    for sp, wi in zip(net.conv_layers(), lifted.conv_layers()):
        assert wi.domain == "winograd"
        assert wi.params["w"].size > sp.params["w"].size
    assert np.array_equal(lifted.layer("fc").params["w"], net.layer("fc").params["w"])


def test_lift_network_zero_and_unsupported():
    net = build_network(SMALL, seed=6)
    for l in net.conv_layers():
        l.params["w"][...] = 0
    assert all(np.all(l.params["w"] == 0) for l in lift_network(net).conv_layers())

    class Odd:
        name, params = "odd", {}

    odd = net.copy()
    odd.layers.append(Odd())
    with pytest.raises(CapabilityError):
        lift_network(odd)


def test_finetune_full_mask_keeps_layers_zero():
    net = build_network(SMALL, seed=7, domain="winograd")
    for l in net.conv_layers():
        l.params["w"][...] = 0
    mask = zero_mask(net)
    finetune(net, mask, synth_dataset(0, 32), PruneConfig(lr=0.1, batch_size=8), 5)
    assert all(np.all(l.params["w"] == 0) for l in net.conv_layers())


def test_finetune_empty_mask_without_penalty_is_plain_sgd():
    a = build_network(SMALL, seed=8, domain="winograd")
    b = a.copy()
    data = synth_dataset(0, 32)
    cfg = PruneConfig(lr=0.05, batch_size=8)
    empty = {k: np.zeros_like(v, dtype=bool) for k, v in a.params().items() if k.endswith("1.w")}
    finetune(a, empty, data, cfg, 4, rng=np.random.default_rng(2))
    train(b, data, cfg, 4, penalty="none", rng=np.random.default_rng(2))
    for key, w in a.params().items():
        assert np.array_equal(w, b.params()[key])


def test_finetune_random_mask_stays_zero():
    net = build_network(SMALL, seed=9, domain="winograd")
    rng = np.random.default_rng(3)
    for l in net.conv_layers():
        l.params["w"][rng.random(l.params["w"].shape) < 0.5] = 0
    mask = zero_mask(net)
    cfg = PruneConfig(lr=0.05, momentum=0.9, lambdas={"conv1": 1e-3, "conv2": 1e-3},
                      batch_size=8)
    seen = []
    finetune(net, mask, synth_dataset(0, 64), cfg, 100, check_every=1,
             on_checkpoint=lambda step, m: seen.append(step), checkpoint_every=25)
    assert seen == [25, 50, 75, 100]
    for key, m in mask.items():
        assert np.all(net.params()[key][m] == 0)
        assert np.any(net.params()[key][~m] != 0)


def test_mask_violation_detected():
    net = build_network(SMALL, seed=10, domain="winograd")
    net.layer("conv1").params["w"][0, 0, 0, 0] = 0
    mask = zero_mask(net)
    net.layer("conv1").params["w"][0, 0, 0, 0] = 1.0
    with pytest.raises(InvariantError):
        check_mask(net, mask)


def test_method_b_project_examples():
    rng = np.random.default_rng(11)
    w = rng.normal(size=(3, 2, 3, 3))
    assert np.max(np.abs(method_b_project(lift(w, T22), T22) - w)) < 1e-12
    np.testing.assert_array_equal(method_b_project(np.zeros((1, 1, 4, 4)), T22), 0)


def test_method_b_residual_orthogonal_to_lift_image():
    rng = np.random.default_rng(12)
    w_hat = rng.normal(size=(4, 4))
    residual = lift(method_b_project(w_hat, T22), T22) - w_hat
    for _ in range(20):
        direction = lift(rng.normal(size=(3, 3)), T22)
        assert abs(np.sum(residual * direction)) < 1e-10


def test_method_b_rank_deficient():
    g = T22.g1.copy()
    g[:, 2] = g[:, 0]
    bad = type(T22)(a1=T22.a1, a2=T22.a2, b1=T22.b1, b2=T22.b2, g1=g, g2=T22.g2,
                    m=2, n=2, r=3, s=3)
    with pytest.raises(NumericError):
        method_b_project(np.zeros((4, 4)), bad)


def test_method_b_prune_runs_and_deploys_density():
    net = build_network(SMALL, seed=13)
    cfg = PruneConfig(lr=0.02, lambdas={"conv1": 1e-3, "conv2": 1e-3}, batch_size=8)
    method_b_prune(net, synth_dataset(0, 32), cfg, 3, {"conv1": 0.5, "conv2": 0.25})
    from winoprune.pruning import deploy_sparse
    deployed = deploy_sparse(net, {"conv1": 0.5, "conv2": 0.25})
    dens = {r["layer"]: r["density"] for r in sparsity_report(deployed)["layers"]}
    assert dens == {"conv1": 0.5, "conv2": 0.25}


def test_keep_top_fraction():
    w = np.array([0.1, -3.0, 2.0, 0.5])
    np.testing.assert_array_equal(keep_top_fraction(w, 0.5), [0, -3.0, 2.0, 0])
    np.testing.assert_array_equal(keep_top_fraction(w, 0.0), 0)


def test_sparsity_report_examples():
    net = build_network(SMALL, seed=14, domain="winograd")
    rep = sparsity_report(net)
    assert all(r["density"] == 1.0 for r in rep["layers"])
    conv1 = net.layer("conv1").params["w"]
    conv1[...] = 0
    conv2 = net.layer("conv2").params["w"]
    conv2.reshape(-1)[::2] = 0
    dens = {r["layer"]: r["density"] for r in sparsity_report(net)["layers"]}
    assert dens == {"conv1": 0.0, "conv2": 0.5}


def test_finetune_checkpoints_after_last_step():
    net = build_network(SMALL, seed=15, domain="winograd")
    seen = []
    finetune(net, zero_mask(net), synth_dataset(0, 32), PruneConfig(lr=0.01, batch_size=8), 5,
             on_checkpoint=lambda step, m: seen.append(step), checkpoint_every=2)
    assert seen == [2, 4, 5]
