"""Multi-view adversarial augmentation and the baseline augmentations.

Batched helpers take features ``V`` of shape ``(N, h, rows, cols, K)``,
observed cell vectors ``(N, h, HW)`` and future cell labels ``(N, P, HW)``.
Each sample in a batch owns a random stream derived from the batch seed and
its position, so results do not depend on batch composition.

Per-sample draw order in :func:`simaug_batch` is fixed: selection noise,
random view (ablation only), attack noise (unless reused), mixing weight.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as nd
from .grid import GridSpec
from .model import ConvGRUForecaster, loss_cls, per_sample_loss_cls
from .tensor import Tensor
from .world import MultiViewTrajectory

MODES = ("none", "standard", "fgsm", "pgd", "simaug")


@dataclass(frozen=True)
class AugConfig:
    """Augmentation settings.

    Parameters
    ----------
    mode : {"none", "standard", "fgsm", "pgd", "simaug"}
    alpha : float
        Beta(alpha, alpha) parameter of the mixing weight.
    eps : float
        Attack step (FGSM) or radius (PGD).
    delta : float
        Bound of the uniform input noise.
    pgd_iters : int
    no_noise, no_attack, random_view, reuse_noise : bool
        Ablation switches for ``mode="simaug"``.
    """

    mode: str = "simaug"
    alpha: float = 0.2
    eps: float = 0.1
    delta: float = 0.1
    pgd_iters: int = 10
    no_noise: bool = False
    no_attack: bool = False
    random_view: bool = False
    reuse_noise: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if self.eps < 0 or self.delta < 0:
            raise ValueError(f"eps and delta must be >= 0, got eps={self.eps}, delta={self.delta}")
        if self.pgd_iters < 1:
            raise ValueError(f"pgd_iters must be >= 1, got {self.pgd_iters}")

    @property
    def noise_bound(self) -> float:
        return 0.0 if self.no_noise else self.delta


@dataclass
class AugmentedSample:
    """One training example after augmentation.

    ``labels`` drive the classification loss; ``future_pixels`` are always
    the anchor view's true future locations and drive the offset loss. The
    offset loss reads ``reg_features``/``reg_obs`` when set (the clean anchor
    inputs of a mixed sample), else ``features``/``obs``.
    """

    features: np.ndarray  # (h, rows, cols, K)
    obs: np.ndarray  # (h, HW)
    labels: np.ndarray  # (P, HW)
    future_pixels: np.ndarray  # (P, 2)
    lam: float = 1.0
    view: int | None = None
    info: dict = field(default_factory=dict)
    fine_labels: np.ndarray | None = None  # (P, HW) cells of ``future_pixels``; ``labels`` when None
    reg_features: np.ndarray | None = None
    reg_obs: np.ndarray | None = None

    @property
    def offset_labels(self) -> np.ndarray:
        return self.labels if self.fine_labels is None else self.fine_labels


@dataclass
class TrainBatch:
    features: np.ndarray
    obs: np.ndarray
    labels: np.ndarray
    future_pixels: np.ndarray
    fine_labels: np.ndarray
    samples: list[AugmentedSample] = field(default_factory=list)
    reg_features: np.ndarray | None = None  # offset-loss inputs when they differ from ``features``
    reg_obs: np.ndarray | None = None

    def __len__(self):
        return len(self.features)

    @classmethod
    def from_samples(cls, samples: list[AugmentedSample]) -> "TrainBatch":
        separate = any(s.reg_features is not None for s in samples)
        return cls(
            np.stack([s.features for s in samples]),
            np.stack([s.obs for s in samples]),
            np.stack([s.labels for s in samples]),
            np.stack([s.future_pixels for s in samples]),
            np.stack([s.offset_labels for s in samples]),
            list(samples),
            np.stack([s.features if s.reg_features is None else s.reg_features for s in samples]) if separate else None,
            np.stack([s.obs if s.reg_obs is None else s.reg_obs for s in samples]) if separate else None,
        )


# ---------------------------------------------------------------------------
# sample plumbing


def view_arrays(record: MultiViewTrajectory, view: int, grid: GridSpec, h: int | None = None):
    """Features, observed cells, future labels and future pixels of one view."""
    h = record.h if h is None else h
    v = record.views[view]
    cells = grid.cell_index(v.pixels)
    return (
        v.features[:h].astype(np.float64),
        grid.one_hot(cells[:h], dtype=np.float64),
        grid.one_hot(cells[h:], dtype=np.float64),
        v.pixels[h:].astype(np.float64),
    )


def anchor_sample(record: MultiViewTrajectory, view: int, grid: GridSpec) -> AugmentedSample:
    V, obs, labels, fut = view_arrays(record, view, grid)
    return AugmentedSample(V, obs, labels, fut, 1.0, None, {"anchor": view})


def sample_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """Independent per-sample streams derived from ``(seed, index)``."""
    return [np.random.default_rng(np.random.SeedSequence([int(seed), i])) for i in range(n)]


def _draw_noise(shape, bound, rng, dtype) -> np.ndarray:
    return nd.sample_linf_noise(shape, bound, rng, dtype=dtype).data


# ---------------------------------------------------------------------------
# model queries


def _model_input(model: ConvGRUForecaster, a) -> np.ndarray:
    return np.asarray(a, dtype=model.dtype)


def view_losses(model: ConvGRUForecaster, V, obs, view_labels) -> np.ndarray:
    """Per-sample, per-view classification losses ``(N, S)`` at the inputs ``V``.

    The encoder runs once per sample; its context is shared by the ``S``
    teacher-forced decodes.
    """
    view_labels = np.asarray(view_labels)
    n, s = view_labels.shape[:2]
    flat = view_labels.reshape((n * s,) + view_labels.shape[2:])
    with nd.no_grad():
        state, context = model.encode_history(_model_input(model, V), _model_input(model, obs))
        rep_state = Tensor(np.repeat(state.data, s, axis=0))
        rep_ctx = Tensor(np.repeat(context.data, s, axis=0))
        probs = model.decode_coarse(rep_ctx, rep_state, np.repeat(_model_input(model, obs), s, axis=0),
                                    _model_input(model, flat))
    return per_sample_loss_cls(probs.data.astype(np.float64), flat, model.config.T).reshape(n, s)


def class_loss_per_sample(model: ConvGRUForecaster, V, obs, labels) -> np.ndarray:
    """Classification loss of each sample, ``(N,)``."""
    return view_losses(model, V, obs, np.asarray(labels)[:, None])[:, 0]


def input_gradient(model: ConvGRUForecaster, V, obs, labels) -> np.ndarray:
    """``d L_cls / d V`` for every sample separately (losses summed over the batch)."""
    x = Tensor(_model_input(model, V), requires_grad=True)
    with model.frozen():
        probs = model.coarse_only(x, _model_input(model, obs), _model_input(model, labels))
        loss = loss_cls(probs, _model_input(model, labels), model.config.T) * float(len(x.data))
        (g,) = nd.gradients(loss, [x])
    return g


# ---------------------------------------------------------------------------
# the augmentation steps


def select_hardest_view(model, V, obs, view_labels, delta: float = 0.0, rng=None, noise=None) -> np.ndarray:
    """Index of the view whose future labels the model fits worst.

    Parameters
    ----------
    V, obs : array
        Anchor inputs, batched.
    view_labels : array, shape (N, S, P, HW)
        Future labels of the ``S`` candidate views.
    delta : float
        Noise bound; one draw is shared by all candidates of a sample.
    rng : Generator or list of Generator, optional
        Used when ``noise`` is not given.
    noise : array, optional
        Explicit perturbation added to ``V``.

    Returns
    -------
    ndarray of int, shape (N,)
        Ties go to the smallest index.
    """
    view_labels = np.asarray(view_labels)
    if view_labels.ndim != 4 or view_labels.shape[1] < 1:
        raise ValueError(f"need at least one candidate view, got labels of shape {view_labels.shape}")
    V = np.asarray(V)
    if noise is None:
        noise = _batch_noise(V, delta, rng, model.dtype)
    losses = view_losses(model, V + noise, obs, view_labels)
    return np.argmax(losses, axis=1)


def _batch_noise(V, bound, rng, dtype) -> np.ndarray:
    if bound == 0 or rng is None:
        return np.zeros_like(V, dtype=dtype)
    rngs = rng if isinstance(rng, (list, tuple)) else [rng] * len(V)
    return np.stack([_draw_noise(V.shape[1:], bound, r, dtype) for r in rngs])


def targeted_fgsm(model, V, obs, target_labels, eps: float, delta: float = 0.0, rng=None, noise=None) -> np.ndarray:
    """One signed-gradient step that lowers the loss toward ``target_labels``.

    The gradient is taken at ``V + noise`` and the step is applied to the
    clean ``V``; the result is not clipped.
    """
    if eps < 0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    V = np.asarray(V)
    if eps == 0:
        return V.copy()
    if noise is None:
        noise = _batch_noise(V, delta, rng, model.dtype)
    g = input_gradient(model, V + noise, obs, target_labels)
    return V - eps * nd.sign(g).data.astype(V.dtype)


def pgd_attack(model, V, obs, target_labels, eps: float, iters: int = 10) -> np.ndarray:
    """Iterated targeted FGSM with step ``eps / iters``, projected onto the ``eps`` ball around ``V``."""
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    V = np.asarray(V)
    if eps == 0:
        return V.copy()
    step = eps / iters
    x = V.copy()
    for _ in range(iters):
        g = input_gradient(model, x, obs, target_labels)
        x = np.clip(x - step * nd.sign(g).data.astype(V.dtype), V - eps, V + eps)
    return x


def mixup_views(V_adv, labels_orig, V_sel, labels_sel, alpha: float = 0.2, rng=None, lam: float | None = None,
                obs_orig=None, obs_sel=None, future_pixels=None, view: int | None = None) -> AugmentedSample:
    """Convex combination of the adversarial anchor and the selected view.

    One weight ``lam ~ Beta(alpha, alpha)`` mixes features and future
    labels, and observed cells when both are given.
    """
    V_adv, V_sel = np.asarray(V_adv, dtype=np.float64), np.asarray(V_sel, dtype=np.float64)
    labels_orig, labels_sel = np.asarray(labels_orig, dtype=np.float64), np.asarray(labels_sel, dtype=np.float64)
    if V_adv.shape != V_sel.shape or labels_orig.shape != labels_sel.shape:
        raise ValueError(f"mixup shapes differ: {V_adv.shape}/{V_sel.shape}, {labels_orig.shape}/{labels_sel.shape}")
    if lam is None:
        lam = float(rng.beta(alpha, alpha))
    V_aug = lam * V_adv + (1.0 - lam) * V_sel
    labels = lam * labels_orig + (1.0 - lam) * labels_sel
    if obs_orig is not None:
        obs = lam * np.asarray(obs_orig, dtype=np.float64) + (1.0 - lam) * np.asarray(obs_sel, dtype=np.float64)
    else:
        obs = None
    fut = np.zeros(labels.shape[:-1] + (2,)) if future_pixels is None else np.asarray(future_pixels, dtype=np.float64)
    return AugmentedSample(V_aug, obs, labels, fut, float(lam), view)


# ---------------------------------------------------------------------------
# batch pipelines


def _candidate_views(record: MultiViewTrajectory, anchor: int) -> list[int]:
    return [j for j in range(len(record.views)) if j != anchor]


def simaug_samples(model, records, anchors, grid: GridSpec, config: AugConfig, seed: int) -> list[AugmentedSample]:
    """Hardest-view selection, targeted attack and mixing for each (record, anchor) pair."""
    n = len(records)
    rngs = sample_rngs(seed, n)
    base = [view_arrays(r, a, grid) for r, a in zip(records, anchors)]
    cands = [_candidate_views(r, a) for r, a in zip(records, anchors)]
    if any(not c for c in cands):
        raise ValueError("every sample needs at least one additional view")
    cand_arrays = [[view_arrays(r, j, grid) for j in c] for r, c in zip(records, cands)]
    V = np.stack([b[0] for b in base])
    obs = np.stack([b[1] for b in base])
    bound = config.noise_bound

    noise1 = np.stack([_draw_noise(V.shape[1:], bound, r, model.dtype) for r in rngs])
    if config.random_view:
        picks = np.array([int(r.integers(len(c))) for r, c in zip(rngs, cands)])
    else:
        picks = _select_ragged(model, V + noise1, obs, [[c[2] for c in ca] for ca in cand_arrays])
    if config.reuse_noise:
        noise2 = noise1
    else:
        noise2 = np.stack([_draw_noise(V.shape[1:], bound, r, model.dtype) for r in rngs])
    targets = np.stack([cand_arrays[i][picks[i]][2] for i in range(n)])
    if config.no_attack:
        V_adv = V.copy()
        if not np.array_equal(V_adv, V):
            raise RuntimeError("attack-free ablation altered the features")
    else:
        V_adv = targeted_fgsm(model, V, obs, targets, config.eps, noise=noise2)

    out = []
    for i in range(n):
        Vs, obs_s, lab_s, _ = cand_arrays[i][picks[i]]
        s = mixup_views(V_adv[i], base[i][2], Vs, lab_s, config.alpha, rngs[i], obs_orig=obs[i], obs_sel=obs_s,
                        future_pixels=base[i][3], view=cands[i][picks[i]])
        s.info = {"anchor": int(anchors[i]), "attack_changed": bool(np.any(V_adv[i] != V[i])),
                  "seed": [int(seed), i], "random_view": bool(config.random_view)}
        # the offset loss keeps the clean anchor view, whose pixels it regresses
        s.fine_labels = base[i][2]
        s.reg_features, s.reg_obs = base[i][0], base[i][1]
        out.append(s)
    return out


def _select_ragged(model, V, obs, label_lists) -> np.ndarray:
    """Hardest-view argmax for samples with possibly different candidate counts."""
    counts = [len(ls) for ls in label_lists]
    if len(set(counts)) == 1:
        losses = view_losses(model, V, obs, np.stack([np.stack(ls) for ls in label_lists]))
        return np.argmax(losses, axis=1)
    return np.array([
        int(np.argmax(view_losses(model, V[i : i + 1], obs[i : i + 1], np.stack(ls)[None])[0]))
        for i, ls in enumerate(label_lists)
    ])


def standard_samples(records, anchors, grid: GridSpec, config: AugConfig, seed: int) -> list[AugmentedSample]:
    """Random horizontal flip (p = 0.5) plus uniform feature jitter."""
    out = []
    for rec, a, rng in zip(records, anchors, sample_rngs(seed, len(records))):
        s = anchor_sample(rec, a, grid)
        out.append(baseline_standard_aug(s, grid, config.delta, rng))
    return out


def flip_sample(sample: AugmentedSample, grid: GridSpec) -> AugmentedSample:
    """Mirror features, cell vectors and pixels about the vertical image axis."""
    perm = grid.mirror_cells(np.arange(grid.n_cells))
    fut = sample.future_pixels.copy()
    fut[..., 0] = grid.image_size[0] - fut[..., 0]
    return AugmentedSample(
        sample.features[:, :, ::-1, :].copy(),
        sample.obs[..., perm],
        sample.labels[..., perm],
        fut,
        sample.lam,
        sample.view,
        dict(sample.info),
        None if sample.fine_labels is None else sample.fine_labels[..., perm],
    )


def baseline_standard_aug(sample: AugmentedSample, grid: GridSpec, delta: float, rng) -> AugmentedSample:
    flipped = bool(rng.random() < 0.5)
    s = flip_sample(sample, grid) if flipped else sample
    jitter = rng.uniform(-delta, delta, size=s.features.shape) if delta > 0 else 0.0
    return AugmentedSample(s.features + jitter, s.obs, s.labels, s.future_pixels, 1.0, None,
                           {**s.info, "flipped": flipped})


def random_targets(shape_np: tuple[int, int], grid: GridSpec, rng) -> np.ndarray:
    """Uniformly random cell label sequences, one-hot ``(P, HW)``."""
    return grid.one_hot(rng.integers(0, grid.n_cells, size=shape_np), dtype=np.float64)


def attack_samples(model, records, anchors, grid: GridSpec, config: AugConfig, seed: int) -> list[AugmentedSample]:
    """FGSM or PGD toward random cell sequences; trained on the anchor's true labels."""
    base = [anchor_sample(r, a, grid) for r, a in zip(records, anchors)]
    rngs = sample_rngs(seed, len(base))
    P = base[0].labels.shape[0]
    targets = np.stack([random_targets((P,), grid, r) for r in rngs])
    V = np.stack([s.features for s in base])
    obs = np.stack([s.obs for s in base])
    if config.mode == "fgsm":
        V_adv = targeted_fgsm(model, V, obs, targets, config.eps)
    else:
        V_adv = pgd_attack(model, V, obs, targets, config.eps, config.pgd_iters)
    return [AugmentedSample(V_adv[i], s.obs, s.labels, s.future_pixels, 1.0, None, s.info) for i, s in enumerate(base)]


def baseline_fgsm(model, sample: AugmentedSample, grid: GridSpec, eps: float, rng) -> AugmentedSample:
    """Single-sample FGSM toward a random cell sequence."""
    target = random_targets(sample.labels.shape[:1], grid, rng)
    V_adv = targeted_fgsm(model, sample.features[None], sample.obs[None], target[None], eps)[0]
    return AugmentedSample(V_adv, sample.obs, sample.labels, sample.future_pixels, 1.0, None,
                           {**sample.info, "target": target})


def baseline_pgd(model, sample: AugmentedSample, grid: GridSpec, eps: float, iters: int, rng) -> AugmentedSample:
    """Single-sample PGD toward a random cell sequence."""
    target = random_targets(sample.labels.shape[:1], grid, rng)
    V_adv = pgd_attack(model, sample.features[None], sample.obs[None], target[None], eps, iters)[0]
    return AugmentedSample(V_adv, sample.obs, sample.labels, sample.future_pixels, 1.0, None,
                           {**sample.info, "target": target})


def augment_batch(model, records, anchors, grid: GridSpec, config: AugConfig, seed: int) -> TrainBatch:
    """Build one training batch under ``config.mode``."""
    if config.mode == "none":
        samples = [anchor_sample(r, a, grid) for r, a in zip(records, anchors)]
    elif config.mode == "standard":
        samples = standard_samples(records, anchors, grid, config, seed)
    elif config.mode in ("fgsm", "pgd"):
        samples = attack_samples(model, records, anchors, grid, config, seed)
    else:
        samples = simaug_samples(model, records, anchors, grid, config, seed)
    return TrainBatch.from_samples(samples)


def simaug_batch(model, records, config: AugConfig, rng, anchors=None, grid: GridSpec | None = None):
    """Mean classification loss over the augmented batch.

    Returns the differentiable loss and the augmented samples.
    """
    grid = model.grid if grid is None else grid
    anchors = [r.original_view_index for r in records] if anchors is None else list(anchors)
    seed = int(rng.integers(2**63))
    samples = simaug_samples(model, records, anchors, grid, config, seed)
    batch = TrainBatch.from_samples(samples)
    probs = model.coarse_only(_model_input(model, batch.features), _model_input(model, batch.obs),
                              _model_input(model, batch.labels))
    return loss_cls(probs, _model_input(model, batch.labels), model.config.T), samples
