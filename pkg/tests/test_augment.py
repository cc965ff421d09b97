import numpy as np
import pytest

from simaug_lab import tensor as nd
from simaug_lab.augment import (
    AugConfig,
    TrainBatch,
    anchor_sample,
    augment_batch,
    baseline_fgsm,
    baseline_pgd,
    baseline_standard_aug,
    class_loss_per_sample,
    flip_sample,
    input_gradient,
    mixup_views,
    pgd_attack,
    select_hardest_view,
    simaug_batch,
    simaug_samples,
    targeted_fgsm,
)

import oracles


@pytest.fixture(scope="module")
def toy(toy_estimator):
    return toy_estimator.model_


@pytest.fixture(scope="module")
def grid(small_data):
    return small_data["train"].grid


def _anchor_batch(records, grid, view=0):
    samples = [anchor_sample(r, view, grid) for r in records]
    return (np.stack([s.features for s in samples]), np.stack([s.obs for s in samples]),
            np.stack([s.labels for s in samples]))


def _view_labels(records, grid, views):
    return np.stack([[anchor_sample(r, j, grid).labels for j in views] for r in records])


def test_config_validation():
    with pytest.raises(ValueError):
        AugConfig(alpha=0)
    with pytest.raises(ValueError):
        AugConfig(eps=-0.1)
    with pytest.raises(ValueError):
        AugConfig(pgd_iters=0)
    with pytest.raises(ValueError):
        AugConfig(mode="cutout")
    assert AugConfig(no_noise=True).noise_bound == 0.0


# hardest view --------------------------------------------------------------


def test_single_candidate_is_returned(toy, small_data, grid):
    recs = small_data["train"].records[:3]
    V, obs, _ = _anchor_batch(recs, grid)
    picks = select_hardest_view(toy, V, obs, _view_labels(recs, grid, [2]), delta=0.1, rng=np.random.default_rng(0))
    np.testing.assert_array_equal(picks, 0)


def test_duplicate_candidates_tie_to_smallest_index(toy, small_data, grid):
    recs = small_data["train"].records[:3]
    V, obs, _ = _anchor_batch(recs, grid)
    picks = select_hardest_view(toy, V, obs, _view_labels(recs, grid, [1, 1, 1]))
    np.testing.assert_array_equal(picks, 0)


def test_empty_candidate_set_raises(toy, small_data, grid):
    V, obs, labels = _anchor_batch(small_data["train"].records[:1], grid)
    with pytest.raises(ValueError):
        select_hardest_view(toy, V, obs, np.zeros((1, 0) + labels.shape[1:]))


@pytest.mark.parametrize("n_views", range(1, 9))
def test_hardest_view_matches_exhaustive_loop(toy, small_data, grid, n_views):
    recs = small_data["train"].records[:4]
    V, obs, labels = _anchor_batch(recs, grid)
    rng = np.random.default_rng(n_views)
    # candidate label sets: real views plus random cell sequences
    cand = np.stack([
        [anchor_sample(r, j % 4, grid).labels if j < 4 else grid.one_hot(rng.integers(grid.n_cells, size=12), np.float64)
         for j in range(n_views)]
        for r in recs
    ])
    noise = rng.uniform(-0.1, 0.1, size=V.shape)
    picks = select_hardest_view(toy, V, obs, cand, noise=noise)
    for i in range(len(recs)):
        best, _ = oracles.hardest_view(toy, V[i] + noise[i], obs[i], cand[i])
        assert picks[i] == best


def test_selection_shares_one_noise_draw(toy, small_data, grid):
    recs = small_data["train"].records[:2]
    V, obs, _ = _anchor_batch(recs, grid)
    labels = _view_labels(recs, grid, [1, 2, 3])
    a = select_hardest_view(toy, V, obs, labels, delta=0.1, rng=np.random.default_rng(5))
    # one shared generator draws the noise sample by sample, in order
    r = np.random.default_rng(5)
    noise = np.stack([nd.sample_linf_noise(V.shape[1:], 0.1, r, dtype=toy.dtype).data for _ in recs])
    np.testing.assert_array_equal(a, select_hardest_view(toy, V, obs, labels, noise=noise))


# attacks -------------------------------------------------------------------


def test_input_gradient_matches_finite_differences(toy, small_data, grid):
    V, obs, labels = _anchor_batch(small_data["test"].records[:1], grid)
    g = input_gradient(toy, V, obs, labels)
    rng = np.random.default_rng(0)
    idx = [tuple(rng.integers(0, s) for s in V.shape) for _ in range(25)]
    step = 1e-5
    for ix in idx:
        vp, vm = V.copy(), V.copy()
        vp[ix] += step
        vm[ix] -= step
        num = (class_loss_per_sample(toy, vp, obs, labels)[0] - class_loss_per_sample(toy, vm, obs, labels)[0]) / (2 * step)
        assert abs(num - g[ix]) <= 1e-3 * max(abs(num), abs(g[ix]), 1e-6)


def test_input_gradient_leaves_parameter_grads(toy, small_data, grid):
    V, obs, labels = _anchor_batch(small_data["test"].records[:2], grid)
    toy.zero_grad()
    input_gradient(toy, V, obs, labels)
    assert all(p.grad is None for p in toy.parameters())
    assert all(p.requires_grad for p in toy.parameters())


def test_fgsm_zero_eps_is_identity(toy, small_data, grid):
    V, obs, labels = _anchor_batch(small_data["test"].records[:2], grid)
    np.testing.assert_array_equal(targeted_fgsm(toy, V, obs, labels, 0.0), V)


def test_fgsm_budget(toy, small_data, grid):
    V, obs, labels = _anchor_batch(small_data["test"].records[:4], grid)
    adv = targeted_fgsm(toy, V, obs, labels, 0.1, delta=0.1, rng=np.random.default_rng(1))
    assert np.max(np.abs(adv - V)) <= 0.1 + 1e-12
    assert np.any(adv != V)


def test_fgsm_steps_from_clean_features(toy, small_data, grid):
    V, obs, labels = _anchor_batch(small_data["test"].records[:2], grid)
    noise = np.random.default_rng(3).uniform(-0.1, 0.1, size=V.shape)
    adv = targeted_fgsm(toy, V, obs, labels, 0.1, noise=noise)
    expected = V - 0.1 * np.sign(input_gradient(toy, V + noise, obs, labels))
    np.testing.assert_array_equal(adv, expected)


def test_fgsm_lowers_target_loss(toy, small_data, grid):
    recs = small_data["test"].records
    V, obs, _ = _anchor_batch(recs, grid)
    target = _view_labels(recs, grid, [1])[:, 0]
    adv = targeted_fgsm(toy, V, obs, target, 0.1, delta=0.1, rng=np.random.default_rng(0))
    before = class_loss_per_sample(toy, V, obs, target)
    after = class_loss_per_sample(toy, adv, obs, target)
    assert np.mean(after < before) >= 0.9


def test_pgd_single_iteration_is_fgsm(toy, small_data, grid):
    V, obs, labels = _anchor_batch(small_data["test"].records[:3], grid)
    np.testing.assert_array_equal(pgd_attack(toy, V, obs, labels, 0.1, iters=1),
                                  targeted_fgsm(toy, V, obs, labels, 0.1))


def test_pgd_stays_in_ball(toy, small_data, grid):
    V, obs, labels = _anchor_batch(small_data["test"].records[:3], grid)
    adv = pgd_attack(toy, V, obs, labels, 0.1, iters=7)
    assert np.max(np.abs(adv - V)) <= 0.1 + 1e-12


def test_pgd_loss_mostly_non_increasing(toy, small_data, grid):
    recs = small_data["test"].records
    V, obs, _ = _anchor_batch(recs, grid)
    rng = np.random.default_rng(0)
    target = grid.one_hot(rng.integers(grid.n_cells, size=(len(recs), 12)), dtype=np.float64)
    losses = [class_loss_per_sample(toy, V, obs, target)]
    for k in range(1, 11):
        # prefix of the same 10-step run
        losses.append(class_loss_per_sample(toy, pgd_attack(toy, V, obs, target, 0.1 * k / 10, iters=k), obs, target))
    monotone = np.all(np.diff(np.stack(losses), axis=0) <= 1e-12, axis=0)
    assert np.mean(monotone) >= 0.8


def test_pgd_rejects_zero_iterations(toy, small_data, grid):
    V, obs, labels = _anchor_batch(small_data["test"].records[:1], grid)
    with pytest.raises(ValueError):
        pgd_attack(toy, V, obs, labels, 0.1, iters=0)


# mixing --------------------------------------------------------------------


def test_mixup_endpoints():
    rng = np.random.default_rng(0)
    Va, Vs = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4))
    la, ls = np.eye(5)[[0, 1]], np.eye(5)[[2, 2]]
    s = mixup_views(Va, la, Vs, ls, lam=1.0)
    np.testing.assert_array_equal(s.features, Va)
    np.testing.assert_array_equal(s.labels, la)
    s = mixup_views(Va, la, Vs, ls, lam=0.0)
    np.testing.assert_array_equal(s.features, Vs)
    np.testing.assert_array_equal(s.labels, ls)


def test_mixup_scalar_arithmetic():
    s = mixup_views(np.array([0.8]), np.array([[1.0, 0.0]]), np.array([0.4]), np.array([[0.0, 1.0]]), lam=0.25)
    assert s.features[0] == pytest.approx(0.5, abs=1e-15)
    np.testing.assert_allclose(s.labels, [[0.25, 0.75]])


def test_mixup_draws_beta_and_rejects_mismatch():
    lam = mixup_views(np.zeros(2), np.eye(2), np.ones(2), np.eye(2), alpha=0.2, rng=np.random.default_rng(4)).lam
    assert lam == np.random.default_rng(4).beta(0.2, 0.2)
    with pytest.raises(ValueError):
        mixup_views(np.zeros(2), np.eye(2), np.ones(3), np.eye(2), lam=0.5)


# full pipeline -------------------------------------------------------------


def test_simaug_samples_invariants(toy, small_data, grid):
    recs = small_data["train"].records[:8]
    samples = simaug_samples(toy, recs, [r.original_view_index for r in recs], grid, AugConfig(), seed=11)
    for rec, s in zip(recs, samples):
        np.testing.assert_allclose(s.labels.sum(-1), 1.0, atol=1e-9)
        assert np.all((s.labels > 0).sum(-1) <= 2)
        assert set(np.unique(s.labels)) <= {0.0, s.lam, 1 - s.lam, 1.0}
        assert s.view != s.info["anchor"]
        # fine labels and pixels stay with the anchor view
        a = anchor_sample(rec, s.info["anchor"], grid)
        np.testing.assert_array_equal(s.future_pixels, a.future_pixels)
        np.testing.assert_array_equal(s.fine_labels, a.labels)


def test_simaug_matches_scripted_pipeline(toy, small_data, grid):
    recs = small_data["train"].records[:6]
    anchors = [r.original_view_index for r in recs]
    cfg = AugConfig()
    loss, samples = simaug_batch(toy, recs, cfg, np.random.default_rng(21))
    seed = int(np.random.default_rng(21).integers(2**63))
    ref_loss, ref = oracles.scripted_simaug(toy, recs, anchors, grid, cfg, seed)
    assert abs(loss.item() - ref_loss) <= 1e-9
    for s, (V, obs, lab, lam, view) in zip(samples, ref):
        assert s.lam == lam and s.view == view
        np.testing.assert_allclose(s.features, V, atol=1e-12, rtol=0)
        np.testing.assert_allclose(s.labels, lab, atol=1e-12, rtol=0)
        np.testing.assert_allclose(s.obs, obs, atol=1e-12, rtol=0)


def test_batch_of_one_equals_single_pipeline(toy, small_data, grid):
    rec = small_data["train"].records[3]
    loss, _ = simaug_batch(toy, [rec], AugConfig(), np.random.default_rng(2))
    seed = int(np.random.default_rng(2).integers(2**63))
    ref, _ = oracles.scripted_simaug(toy, [rec], [rec.original_view_index], grid, AugConfig(), seed)
    assert abs(loss.item() - ref) <= 1e-12


def test_half_mixing_loss_is_mean_of_halves(toy, small_data, grid):
    rec = small_data["train"].records[0]
    V, obs, la = _anchor_batch([rec], grid, 0)
    Vs, obs_s, ls = _anchor_batch([rec], grid, 2)
    s = mixup_views(V[0], la[0], Vs[0], ls[0], lam=0.5, obs_orig=obs[0], obs_sel=obs_s[0])
    mixed = class_loss_per_sample(toy, s.features[None], s.obs[None], s.labels[None])[0]
    a = class_loss_per_sample(toy, s.features[None], s.obs[None], la)[0]
    b = class_loss_per_sample(toy, s.features[None], s.obs[None], ls)[0]
    assert mixed == pytest.approx(0.5 * a + 0.5 * b, abs=1e-12)


def test_ablation_hooks(toy, small_data, grid):
    recs = small_data["train"].records[:6]
    anchors = [0] * 6
    no_attack = simaug_samples(toy, recs, anchors, grid, AugConfig(no_attack=True), seed=3)
    assert not any(s.info["attack_changed"] for s in no_attack)
    full = simaug_samples(toy, recs, anchors, grid, AugConfig(), seed=3)
    assert all(s.info["attack_changed"] for s in full)
    # zero noise equals a zero noise bound
    a = simaug_samples(toy, recs, anchors, grid, AugConfig(no_noise=True), seed=3)
    b = simaug_samples(toy, recs, anchors, grid, AugConfig(delta=0.0), seed=3)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.features, y.features)
    # random view: uniform pick from the recorded per-sample stream
    rv = simaug_samples(toy, recs, anchors, grid, AugConfig(random_view=True), seed=3)
    for i, s in enumerate(rv):
        r = np.random.default_rng(np.random.SeedSequence(s.info["seed"]))
        r.uniform(size=recs[i].views[0].features[:8].shape)
        assert s.view == 1 + int(r.integers(3))
    for cfg in (AugConfig(no_attack=True), AugConfig(random_view=True), AugConfig(reuse_noise=True)):
        _, ref = oracles.scripted_simaug(toy, recs, anchors, grid, cfg, 3)
        got = simaug_samples(toy, recs, anchors, grid, cfg, seed=3)
        for s, (V, _, _, lam, view) in zip(got, ref):
            assert s.view == view and s.lam == lam
            np.testing.assert_allclose(s.features, V, atol=1e-12, rtol=0)


def test_augmentation_is_deterministic(toy, small_data, grid):
    recs = small_data["train"].records[:4]
    for mode in ("standard", "fgsm", "pgd", "simaug"):
        a = augment_batch(toy, recs, [0, 1, 2, 3], grid, AugConfig(mode=mode), 17)
        b = augment_batch(toy, recs, [0, 1, 2, 3], grid, AugConfig(mode=mode), 17)
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.labels, b.labels)


# baselines -----------------------------------------------------------------


def test_flip_is_an_involution(small_data, grid):
    s = anchor_sample(small_data["train"].records[0], 1, grid)
    back = flip_sample(flip_sample(s, grid), grid)
    for name in ("features", "obs", "labels"):
        np.testing.assert_array_equal(getattr(back, name), getattr(s, name))
    np.testing.assert_allclose(back.future_pixels, s.future_pixels, atol=1e-12, rtol=0)


def test_flipped_location_lands_in_mirrored_column(small_data, grid):
    s = anchor_sample(small_data["train"].records[0], 1, grid)
    f = flip_sample(s, grid)
    cells = grid.cell_index(s.future_pixels)
    np.testing.assert_array_equal(grid.cell_index(f.future_pixels) % grid.cols, grid.cols - 1 - cells % grid.cols)
    np.testing.assert_array_equal(f.labels.argmax(-1), grid.mirror_cells(cells))


def test_standard_jitter_bound(small_data, grid):
    s = anchor_sample(small_data["train"].records[0], 0, grid)
    for seed in range(6):
        out = baseline_standard_aug(s, grid, 0.1, np.random.default_rng(seed))
        base = flip_sample(s, grid).features if out.info["flipped"] else s.features
        assert np.max(np.abs(out.features - base)) <= 0.1


def test_fgsm_baseline(toy, small_data, grid):
    s = anchor_sample(small_data["test"].records[0], 0, grid)
    same = baseline_fgsm(toy, s, grid, 0.0, np.random.default_rng(0))
    np.testing.assert_array_equal(same.features, s.features)
    a = baseline_fgsm(toy, s, grid, 0.1, np.random.default_rng(0))
    b = baseline_fgsm(toy, s, grid, 0.1, np.random.default_rng(1))
    assert np.max(np.abs(a.features - s.features)) <= 0.1 + 1e-12
    assert not np.array_equal(a.info["target"], b.info["target"])
    np.testing.assert_array_equal(a.labels, s.labels)


def test_pgd_baseline(toy, small_data, grid):
    s = anchor_sample(small_data["test"].records[0], 0, grid)
    out = baseline_pgd(toy, s, grid, 0.1, 10, np.random.default_rng(0))
    assert np.max(np.abs(out.features - s.features)) <= 0.1 + 1e-12
    np.testing.assert_array_equal(out.labels, s.labels)


def test_mixed_samples_keep_clean_offset_inputs(toy, small_data, grid):
    recs = small_data["train"].records[:4]
    anchors = [1, 0, 3, 2]
    samples = simaug_samples(toy, recs, anchors, grid, AugConfig(), seed=5)
    batch = TrainBatch.from_samples(samples)
    for rec, a, s in zip(recs, anchors, samples):
        clean = anchor_sample(rec, a, grid)
        np.testing.assert_array_equal(s.reg_features, clean.features)
        np.testing.assert_array_equal(s.reg_obs, clean.obs)
        np.testing.assert_array_equal(s.fine_labels, clean.labels)
        np.testing.assert_array_equal(s.future_pixels, clean.future_pixels)
    assert batch.reg_features.shape == batch.features.shape
    assert TrainBatch.from_samples([anchor_sample(recs[0], 0, grid)]).reg_features is None


def test_offset_loss_ignores_the_mixed_inputs(toy, small_data, grid):
    from simaug_lab.model import loss_reg

    recs = small_data["train"].records[:3]
    batch = augment_batch(toy, recs, [0, 1, 2], grid, AugConfig(mode="simaug"), 9)
    _, offsets = toy.forward(batch.features, batch.obs, batch.labels, batch.fine_labels,
                             fine_features=batch.reg_features, fine_locations=batch.reg_obs)
    clean = TrainBatch.from_samples([anchor_sample(r, a, grid) for r, a in zip(recs, [0, 1, 2])])
    _, ref = toy.forward(clean.features, clean.obs, clean.labels)
    np.testing.assert_array_equal(offsets.data, ref.data)
    T = toy.config.T
    assert loss_reg(offsets, batch.future_pixels, grid, T).item() == loss_reg(ref, clean.future_pixels, grid, T).item()
