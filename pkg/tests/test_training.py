import io
import math

import numpy as np
import pytest

from gamair.errors import ConfigError, NumericError, ShapeError
from gamair.imageio import make_chessboard, make_rng, make_texture, split_rng
from gamair.metrics import psnr
from gamair.network import checkpoint_bytes, preset
from gamair.tensor import Tape, Tensor
from gamair.training import (
    DenoiseSettings,
    MemorizeExperimentConfig,
    MemorizeNet,
    OptimizerState,
    adamw_step,
    calibrated_noise,
    cosine_lr,
    evaluate,
    loss_l1,
    loss_l2,
    loss_psnr,
    make_eval_set,
    match_hidden_width,
    memorize_param_count,
    run_denoise_training,
    run_memorize_experiment,
    window_diverged,
)


def scalar(value):
    return Tensor(np.full((1, 1, 1, 1), value))


# -- schedule -----------------------------------------------------------------


def test_cosine_endpoints_and_midpoint():
    st = OptimizerState(total_steps=1000)
    assert cosine_lr(0, st) == 1e-3
    assert cosine_lr(500, st) == pytest.approx((1e-3 + 1e-7) / 2, rel=1e-12) == pytest.approx(5.0005e-4)
    assert cosine_lr(1000, st) == 1e-7
    assert cosine_lr(5000, st) == 1e-7
    with pytest.raises(ValueError):
        cosine_lr(-1, st)


def test_cosine_monotone():
    st = OptimizerState(total_steps=377)
    lrs = [cosine_lr(s, st) for s in range(378)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


# -- AdamW --------------------------------------------------------------------


def test_zero_gradient_is_identity():
    p = Tensor(np.random.default_rng(0).standard_normal((1, 2, 3, 3)))
    before = p.data.copy()
    st = OptimizerState.for_params([p], 10)
    for _ in range(3):
        adamw_step([p], [np.zeros_like(p.data)], st, 1e-3)
    np.testing.assert_array_equal(p.data, before)
    assert st.step == 3


def test_first_step_magnitude_is_lr():
    p = scalar(0.0)
    st = OptimizerState.for_params([p], 10, eps=0.0)
    adamw_step([p], [np.ones((1, 1, 1, 1))], st, 0.01)
    assert p.data.item() == pytest.approx(-0.01, rel=1e-12)


def test_three_steps_on_quadratic():
    # f(p) = p^2 from p = 1, lr 0.1; values worked out by hand from the update rule
    p = scalar(1.0)
    st = OptimizerState.for_params([p], 10)
    expected = [0.9000000005, 0.8001386012300649, 0.7005510908684208]
    for want in expected:
        adamw_step([p], [2 * p.data], st, 0.1)
        assert p.data.item() == pytest.approx(want, rel=1e-12)


def test_weight_decay_is_decoupled():
    p = scalar(2.0)
    st = OptimizerState.for_params([p], 10, weight_decay=0.5)
    adamw_step([p], [np.zeros((1, 1, 1, 1))], st, 0.1)
    assert p.data.item() == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_nan_gradient_names_parameter():
    p, q = scalar(1.0), scalar(1.0)
    st = OptimizerState.for_params([p, q], 10)
    with pytest.raises(NumericError, match="decoder.bias"):
        adamw_step([p, q], [np.ones((1, 1, 1, 1)), np.full((1, 1, 1, 1), np.nan)], st, 0.1, ["enc.w", "decoder.bias"])
    assert p.data.item() == 1.0 and st.step == 0


def test_adamw_argument_checks():
    p = scalar(1.0)
    st = OptimizerState.for_params([p], 1)
    with pytest.raises(ValueError):
        adamw_step([p], [np.ones((1, 1, 1, 1))], st, -1.0)
    with pytest.raises(ShapeError):
        adamw_step([p], [np.ones((1, 1, 1, 2))], st, 0.1)
    adamw_step([p], [np.ones((1, 1, 1, 1))], st, 0.1)
    with pytest.raises(ConfigError):
        adamw_step([p], [np.ones((1, 1, 1, 1))], st, 0.1)


# -- losses -------------------------------------------------------------------


def test_losses_trivial_cases():
    a = Tensor(np.random.default_rng(0).random((1, 3, 4, 4)))
    assert loss_l2(a, a).item() == 0.0
    assert loss_l1(a, Tensor(a.data + 1)).item() == pytest.approx(1.0)
    with pytest.raises(ShapeError):
        loss_l1(a, Tensor(np.zeros((1, 3, 4, 5))))


def test_losses_match_direct_sums():
    rng = np.random.default_rng(1)
    p, t = rng.random((2, 3, 5, 4)), rng.random((2, 3, 5, 4))
    n = p.size
    sq = sum((float(a) - float(b)) ** 2 for a, b in zip(p.ravel(), t.ravel())) / n
    ab = sum(abs(float(a) - float(b)) for a, b in zip(p.ravel(), t.ravel())) / n
    assert loss_l2(Tensor(p), Tensor(t)).item() == pytest.approx(sq, rel=1e-12)
    assert loss_l1(Tensor(p), Tensor(t)).item() == pytest.approx(ab, rel=1e-12)
    assert loss_psnr(Tensor(p), Tensor(t)).item() == pytest.approx(-psnr(p, t), rel=1e-12)


def test_loss_gradient_flows():
    p = Tensor(np.full((1, 1, 2, 2), 3.0), requires_grad=True)
    with Tape() as tape:
        loss = loss_l2(p, Tensor(np.ones((1, 1, 2, 2))))
    tape.backward(loss)
    np.testing.assert_allclose(p.grad, 2 * 2.0 / 4)


def test_window_divergence_flag():
    assert not window_diverged(list(np.linspace(1, 0, 2000)))
    assert window_diverged([1.0] * 500 + [2.0] * 500)


# -- memorization probe -------------------------------------------------------


@pytest.mark.parametrize("kind", ["plain", "squeeze-excite", "gama"])
@pytest.mark.parametrize("budget", [1000, 2109, 4000])
def test_hidden_width_matches_budget(kind, budget):
    try:
        h = match_hidden_width(kind, budget)
    except ConfigError:
        # must be genuinely unreachable: no width of the right parity is within 1%
        step = 2 if kind == "squeeze-excite" else 1
        assert all(abs(memorize_param_count(w, kind) - budget) > 0.01 * budget for w in range(step, 200, step))
        return
    count = memorize_param_count(h, kind)
    assert abs(count - budget) <= 0.01 * budget
    net = MemorizeNet(h, kind, make_rng(0))
    assert net.num_params() == count


def test_budget_2109_fits_every_variant():
    widths = {k: match_hidden_width(k, 2109) for k in ("plain", "squeeze-excite", "gama")}
    assert widths == {"plain": 38, "squeeze-excite": 26, "gama": 36}


def test_param_count_formula():
    assert memorize_param_count(10, "plain") == 2 * 3 * 10 * 9 + 10 + 3
    assert memorize_param_count(10, "se") == memorize_param_count(10, "plain") + 100
    assert memorize_param_count(10, "gama") == memorize_param_count(10, "plain") + 147


def test_calibrated_noise_hits_target_exactly():
    img = make_chessboard(32, 4)
    noisy = calibrated_noise(img, 10.4, make_rng(0))
    assert psnr(noisy, img) == pytest.approx(10.4, abs=1e-9)


def _mem_cfg(**kw):
    base = dict(image=make_chessboard(32, 4), param_budget=2109, iterations=0, seed=0)
    return MemorizeExperimentConfig(**{**base, **kw})


def test_zero_iterations_gives_untrained_output():
    res = run_memorize_experiment(_mem_cfg())
    assert res.losses == []
    assert res.psnr_noisy == pytest.approx(10.4, abs=1e-9)
    # rebuild the untrained network from the same seed stream
    fresh = MemorizeNet(res.hidden, "gama", split_rng(0, 2)[1])
    out = fresh(Tensor(res.noisy[None], dtype=np.float32)).data[0].astype(np.float64)
    np.testing.assert_array_equal(res.restored, out)
    assert res.psnr_final == psnr(out, make_chessboard(32, 4))


def test_overparameterized_probe_rejected():
    with pytest.raises(ConfigError, match="underparameterized"):
        run_memorize_experiment(_mem_cfg(image=make_chessboard(16, 4)))


def test_memorization_is_deterministic_and_learns():
    a = run_memorize_experiment(_mem_cfg(iterations=30, block_kind="se"))
    b = run_memorize_experiment(_mem_cfg(iterations=30, block_kind="se"))
    assert a.restored.tobytes() == b.restored.tobytes()
    assert a.losses == b.losses
    assert a.losses[-1] < a.losses[0]
    assert a.params < make_chessboard(32, 4).size


# -- denoising ----------------------------------------------------------------


def _corpus():
    return [make_texture(48, make_rng(i)) for i in range(3)]


def test_denoise_same_seed_same_checkpoint():
    s = DenoiseSettings(iterations=4, patch_size=8, batch_size=2)
    a = run_denoise_training(preset("tiny"), _corpus(), s)
    b = run_denoise_training(preset("tiny"), _corpus(), s)
    assert checkpoint_bytes(a) == checkpoint_bytes(b)
    c = run_denoise_training(preset("tiny"), _corpus(), DenoiseSettings(iterations=4, patch_size=8, batch_size=2, seed=1))
    assert checkpoint_bytes(a) != checkpoint_bytes(c)


def test_noise_free_training_approaches_identity():
    ev = make_eval_set(_corpus(), 0.0, 16, 8, seed=99)
    s = DenoiseSettings(sigma=0.0, iterations=200, patch_size=16, batch_size=2)
    net = run_denoise_training(preset("tiny"), _corpus(), s)
    assert evaluate(net, *ev) > 40


def test_denoise_log_format():
    buf = io.StringIO()
    ev = make_eval_set(_corpus(), 0.1, 8, 2, seed=5)
    s = DenoiseSettings(sigma=0.1, iterations=5, patch_size=8, batch_size=1, log_every=2)
    run_denoise_training(preset("tiny"), _corpus(), s, eval_set=ev, log=buf)
    rows = [r.split(",") for r in buf.getvalue().splitlines()]
    assert rows[0] == ["iter", "lr", "loss", "psnr_eval"]
    assert [int(r[0]) for r in rows[1:]] == [1, 2, 4, 5]
    assert all(math.isfinite(float(x)) for r in rows[1:] for x in r)


def test_denoise_rejects_bad_input():
    with pytest.raises(ConfigError):
        run_denoise_training(preset("tiny"), [], DenoiseSettings())
    with pytest.raises(ConfigError):
        run_denoise_training(preset("tiny"), _corpus(), DenoiseSettings(patch_size=10))


def test_denoise_nan_reports_iteration():
    bad = [np.full((3, 16, 16), np.nan)]
    with pytest.raises(NumericError, match="iteration 1"):
        run_denoise_training(preset("tiny"), bad, DenoiseSettings(iterations=3, patch_size=8, batch_size=1))
