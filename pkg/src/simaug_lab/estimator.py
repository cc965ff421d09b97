"""Scikit-learn style estimator wrapping the forecaster and its training loop."""

from __future__ import annotations

import math
import time

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import tensor as nd
from .augment import AugConfig, augment_batch
from .metrics import evaluate, evaluation_set
from .model import (
    Adadelta,
    BackboneConfig,
    ConvGRUForecaster,
    loss_cls,
    loss_reg,
    total_loss,
)
from .world import Dataset, MultiViewTrajectory


class NonFiniteLoss(RuntimeError):
    """Training produced a NaN or infinite loss; ``batch`` holds the offending inputs."""

    def __init__(self, message, step, batch):
        super().__init__(message)
        self.step = step
        self.batch = batch


def check_records(X) -> tuple[list[MultiViewTrajectory], object]:
    """Return the records and grid of a dataset-like input.

    Raises
    ------
    TypeError
        If ``X`` is neither a :class:`Dataset` nor a list of trajectories.
    ValueError
        If ``X`` is empty or its records disagree in horizon.
    """
    if isinstance(X, Dataset):
        records, grid = list(X.records), X.grid
    else:
        records, grid = list(X), None
        if records and not all(isinstance(r, MultiViewTrajectory) for r in records):
            raise TypeError("expected a Dataset or a list of MultiViewTrajectory")
    if not records:
        raise ValueError("no training records")
    if len({(r.h, r.T) for r in records}) != 1:
        raise ValueError("records disagree in observed/total length")
    return records, grid


def _as_eval_inputs(X, grid):
    if isinstance(X, Dataset):
        feats, obs, _, _ = evaluation_set(X)
        return feats, obs
    if isinstance(X, tuple) and len(X) == 2:
        return np.asarray(X[0]), np.asarray(X[1])
    raise TypeError("expected a Dataset or a (features, observed_cells) tuple")


class TrajectoryForecaster(BaseEstimator):
    """Coarse-to-fine grid forecaster trained with optional view augmentation.

    Parameters
    ----------
    hidden_size : int, default 32
        Channels of every recurrent state.
    mlp_hidden : int, default 32
    decoder_input : {"context", "teacher"}, default "context"
        Whether decoder steps also see the previous cell.
    aug : {"none", "standard", "fgsm", "pgd", "simaug"}, default "none"
    alpha, eps, delta : float
        Mixing, attack and noise parameters (see :class:`AugConfig`).
    pgd_iters : int, default 10
    no_noise, no_attack, random_view, reuse_noise : bool
        Ablations of the multi-view augmentation.
    drop_views : tuple of str
        Camera ids removed from every training record.
    learning_rate : float, default 0.3
    adadelta_eps : float, default 1e-6
    weight_decay : float, default 0.001
    reg_weight : float, default 0.5
    batch_size : int, default 16
    n_steps : int, default 2000
    random_state : int, default 0
    dtype : {"float32", "float64"}
    log_every : int, default 0
        Print a loss line every that many steps (0 is silent).
    checkpoint_every : int, default 0
    checkpoint_path : str or None
        Where periodic checkpoints go when ``checkpoint_every > 0``.

    Attributes
    ----------
    model_ : ConvGRUForecaster
    loss_curve_ : list of dict
        Per-step ``step, total, cls, reg`` values.
    grid_ : GridSpec
    """

    def __init__(
        self,
        hidden_size=32,
        mlp_hidden=32,
        decoder_input="context",
        aug="none",
        alpha=0.2,
        eps=0.1,
        delta=0.1,
        pgd_iters=10,
        no_noise=False,
        no_attack=False,
        random_view=False,
        reuse_noise=False,
        drop_views=(),
        learning_rate=0.3,
        adadelta_eps=1e-6,
        weight_decay=0.001,
        reg_weight=0.5,
        batch_size=16,
        n_steps=2000,
        random_state=0,
        dtype="float32",
        log_every=0,
        checkpoint_every=0,
        checkpoint_path=None,
    ):
        self.hidden_size = hidden_size
        self.mlp_hidden = mlp_hidden
        self.decoder_input = decoder_input
        self.aug = aug
        self.alpha = alpha
        self.eps = eps
        self.delta = delta
        self.pgd_iters = pgd_iters
        self.no_noise = no_noise
        self.no_attack = no_attack
        self.random_view = random_view
        self.reuse_noise = reuse_noise
        self.drop_views = drop_views
        self.learning_rate = learning_rate
        self.adadelta_eps = adadelta_eps
        self.weight_decay = weight_decay
        self.reg_weight = reg_weight
        self.batch_size = batch_size
        self.n_steps = n_steps
        self.random_state = random_state
        self.dtype = dtype
        self.log_every = log_every
        self.checkpoint_every = checkpoint_every
        self.checkpoint_path = checkpoint_path

    # ------------------------------------------------------------------

    def aug_config(self) -> AugConfig:
        return AugConfig(
            mode=self.aug,
            alpha=self.alpha,
            eps=self.eps,
            delta=self.delta,
            pgd_iters=self.pgd_iters,
            no_noise=self.no_noise,
            no_attack=self.no_attack,
            random_view=self.random_view,
            reuse_noise=self.reuse_noise,
        )

    def _validate(self):
        if int(self.batch_size) < 1 or int(self.n_steps) < 0:
            raise ValueError(f"batch_size must be >= 1 and n_steps >= 0, got {self.batch_size}, {self.n_steps}")
        if int(self.hidden_size) < 1 or int(self.mlp_hidden) < 1:
            raise ValueError("hidden sizes must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        return self.aug_config()

    def _streams(self):
        seed = int(self.random_state)
        init = np.random.default_rng(np.random.SeedSequence([seed, 0]))
        batches = np.random.default_rng(np.random.SeedSequence([seed, 1]))
        return init, batches

    def _prepare_records(self, records):
        if self.drop_views:
            drop = set(self.drop_views)
            records = [r.select_views([c for c in r.camera_ids if c not in drop]) for r in records]
        if self.aug == "simaug" and any(len(r.views) < 2 for r in records):
            raise ValueError("multi-view augmentation needs at least two views per record")
        return records

    def _build_model(self, records, grid, rng):
        h, T = records[0].h, records[0].T
        K = records[0].views[0].features.shape[-1]
        cfg = BackboneConfig(
            cols=grid.cols,
            rows=grid.rows,
            image_size=grid.image_size,
            n_classes=K,
            hidden=int(self.hidden_size),
            mlp_hidden=int(self.mlp_hidden),
            decoder_input=self.decoder_input,
            obs_len=h,
            pred_len=T - h,
        )
        return ConvGRUForecaster(cfg, rng, dtype=np.dtype(self.dtype))

    def fit(self, X, y=None, grid=None):
        """Train on a dataset (or list of trajectories with an explicit ``grid``)."""
        config = self._validate()
        records, dgrid = check_records(X)
        grid = dgrid if grid is None else grid
        if grid is None:
            raise ValueError("a grid is required when fitting on a plain record list")
        records = self._prepare_records(records)
        init_rng, batch_rng = self._streams()
        model = self._build_model(records, grid, init_rng)
        opt = Adadelta(model.parameters(), lr=self.learning_rate, eps=self.adadelta_eps)
        self.model_, self.grid_ = model, grid
        self.loss_curve_ = []
        start = time.perf_counter()
        for step in range(int(self.n_steps)):
            idx = batch_rng.integers(0, len(records), size=int(self.batch_size))
            recs = [records[i] for i in idx]
            anchors = [int(batch_rng.integers(len(r.views))) for r in recs]
            aug_seed = int(batch_rng.integers(2**63))
            batch = augment_batch(model, recs, anchors, grid, config, aug_seed)
            self.train_step(batch, opt, step)
            if self.log_every and (step + 1) % self.log_every == 0:
                e = self.loss_curve_[-1]
                print(f"step {step + 1:5d}  loss {e['total']:.4f}  cls {e['cls']:.4f}  reg {e['reg']:.4f}", flush=True)
            if self.checkpoint_every and self.checkpoint_path and (step + 1) % self.checkpoint_every == 0:
                self.save(self.checkpoint_path)
        self.fit_seconds_ = time.perf_counter() - start
        return self

    def train_step(self, batch, opt, step: int = 0) -> float:
        model = self.model_
        dt = model.dtype
        opt.zero_grad()
        fine_in = {} if batch.reg_features is None else {
            "fine_features": batch.reg_features.astype(dt), "fine_locations": batch.reg_obs.astype(dt)}
        probs, offsets = model.forward(batch.features.astype(dt), batch.obs.astype(dt), batch.labels.astype(dt),
                                       batch.fine_labels.astype(dt), **fine_in)
        l_cls = loss_cls(probs, batch.labels, model.config.T)
        l_reg = loss_reg(offsets, batch.future_pixels, model.grid, model.config.T)
        loss = total_loss(l_cls, l_reg, model.parameters(), self.reg_weight, self.weight_decay)
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteLoss(f"non-finite loss {value} at step {step}", step, batch)
        nd.backward(loss)
        opt.step()
        self.loss_curve_.append({"step": step, "total": value, "cls": l_cls.item(), "reg": l_reg.item()})
        return value

    # ------------------------------------------------------------------

    def predict(self, X) -> np.ndarray:
        """Greedy pixel forecasts ``(M, P, 2)`` for every evaluation trajectory."""
        check_is_fitted(self, "model_")
        feats, obs = _as_eval_inputs(X, self.grid_)
        return self.model_.predict(feats, obs).locations

    def predict_proba(self, X) -> np.ndarray:
        """Per-step cell distributions ``(M, P, HW)`` under greedy decoding."""
        check_is_fitted(self, "model_")
        feats, obs = _as_eval_inputs(X, self.grid_)
        return self.model_.predict(feats, obs).probs

    def sample(self, X, K: int = 20, seed: int = 0) -> np.ndarray:
        """``K`` forecasts per trajectory, ``(M, K, P, 2)``; the first is greedy."""
        from .metrics import sample_cells_sampler

        check_is_fitted(self, "model_")
        feats, obs = _as_eval_inputs(X, self.grid_)
        rng = np.random.default_rng(seed)
        hyps = [self.model_.predict(feats, obs).locations]
        for _ in range(K - 1):
            hyps.append(self.model_.predict(feats, obs, sampler=sample_cells_sampler(rng)).locations)
        return np.stack(hyps, axis=1)

    def evaluate(self, dataset, K: int = 1, seed: int = 0, method: str = ""):
        check_is_fitted(self, "model_")
        return evaluate(self.model_, dataset, K=K, seed=seed, method=method or self.aug)

    def score(self, X, y=None) -> float:
        """Negative minADE of the greedy forecast (higher is better)."""
        return -self.evaluate(X).min_ade

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        params = {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.get_params().items()}
        self.model_.save(path, extra={"estimator": params, "steps": len(self.loss_curve_)})

    @classmethod
    def load(cls, path) -> "TrajectoryForecaster":
        model, extra = ConvGRUForecaster.load(path)
        params = dict(extra.get("estimator", {}))
        if "drop_views" in params:
            params["drop_views"] = tuple(params["drop_views"])
        est = cls(**params)
        est.model_, est.grid_ = model, model.grid
        est.loss_curve_ = []
        return est
