"""Grid-based trajectory forecaster: conv-GRU history encoder, coarse and fine decoders.

Shapes use channels-last grids. With ``N`` samples, ``h`` observed steps,
``P = T - h`` predicted steps, a ``rows x cols`` grid (``HW`` cells) and ``K``
semantic classes:

* features ``V``: ``(N, h, rows, cols, K)``
* observed locations ``y``: ``(N, h, HW)`` one-hot (or soft) cell vectors
* coarse output: ``(N, P, HW)`` distributions
* fine output: ``(N, P, HW, 2)`` pixel offsets from every cell centre
"""

from __future__ import annotations

import contextlib
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as nd
from .grid import GridSpec
from .tensor import Tensor

CHECKPOINT_MAGIC = b"SIMAUGCK"
CHECKPOINT_VERSION = 1
LOG_EPS = 1e-12
REG_WEIGHT = 0.5
WEIGHT_DECAY = 0.001
# "context": every decoder step sees only the context and its own state;
# "teacher": it also sees the previous cell (true cells in training, its own at inference)
DECODER_INPUTS = ("context", "teacher")
# cell coordinates and the agent position relative to each cell, both in [-1, 1] image units
POSITION_CHANNELS = 4


@dataclass(frozen=True)
class BackboneConfig:
    cols: int = 12
    rows: int = 6
    image_size: tuple[float, float] = (480.0, 240.0)
    n_classes: int = 13
    hidden: int = 32
    mlp_hidden: int = 32
    kernel: int = 3
    obs_len: int = 8
    pred_len: int = 12
    decoder_input: str = "context"
    position_channels: bool = True

    def __post_init__(self):
        if self.decoder_input not in DECODER_INPUTS:
            raise ValueError(f"decoder_input must be one of {DECODER_INPUTS}, got {self.decoder_input!r}")

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.cols, self.rows, tuple(self.image_size))

    @property
    def T(self) -> int:
        return self.obs_len + self.pred_len


class Prediction:
    """Decoder outputs plus the composed pixel locations."""

    def __init__(self, probs: np.ndarray, offsets: np.ndarray, grid: GridSpec, cells=None):
        self.probs = probs
        self.offsets = offsets
        if cells is None:
            self.cells = np.argmax(probs, axis=-1)
            self.locations = compose_prediction(probs, offsets, grid)
        else:
            self.cells = np.asarray(cells)
            self.locations = compose_at_cells(self.cells, offsets, grid)


def _glorot(rng, shape, fan_in, fan_out, dtype):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class ConvGRUForecaster:
    """Encoder/decoder network with parameters held as leaf tensors.

    Parameters
    ----------
    config : BackboneConfig
    rng : numpy.random.Generator
        Source for weight initialisation.
    dtype : numpy dtype, default float32
    """

    def __init__(self, config: BackboneConfig, rng: np.random.Generator | None = None, dtype=np.float32,
                 fused: bool = True):
        self.config = config
        self.fused = fused
        self.grid = config.grid
        self.dtype = np.dtype(dtype)
        self.centers = self.grid.centers
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(0) if rng is None else rng
        c, k, d, m = config.n_classes, config.kernel, config.hidden, config.mlp_hidden
        extra = POSITION_CHANNELS if config.position_channels else 0
        ctx = d + config.obs_len * c + extra
        self._conv("enc_x", k, c + 1 + extra, 3 * d, rng, bias=True)
        self._conv("enc_h", k, d, 3 * d, rng)
        for name in ("coarse", "fine"):
            self._conv(f"{name}_x", k, ctx, 3 * d, rng, bias=True)
            if config.decoder_input == "teacher":
                self._conv(f"{name}_y", k, 1, 3 * d, rng)
            self._conv(f"{name}_h", k, d, 3 * d, rng)
        self._dense("coarse_out", d, 1, rng)
        self._dense("fine_mlp", d, m, rng)
        self._dense("fine_out", m, 2, rng)

    # parameters ---------------------------------------------------------

    def _add(self, name, value):
        self.params[name] = Tensor(value.astype(self.dtype), requires_grad=True)

    def _conv(self, name, k, cin, cout, rng, bias=False):
        fan_in, fan_out = k * k * cin, k * k * cout // 3
        self._add(f"{name}.w", _glorot(rng, (k, k, cin, cout), fan_in, fan_out, self.dtype))
        if bias:
            self._add(f"{name}.b", np.zeros(cout))

    def _dense(self, name, cin, cout, rng):
        self._add(f"{name}.w", _glorot(rng, (cin, cout), cin, cout, self.dtype))
        self._add(f"{name}.b", np.zeros(cout))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    @contextlib.contextmanager
    def frozen(self):
        """Exclude all parameters from differentiation inside the block."""
        flags = {n: p.requires_grad for n, p in self.params.items()}
        for p in self.params.values():
            p.requires_grad = False
        try:
            yield self
        finally:
            for n, p in self.params.items():
                p.requires_grad = flags[n]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise KeyError(f"parameter names differ: {sorted(missing)}")
        for n, p in self.params.items():
            if state[n].shape != p.shape:
                raise ValueError(f"{n}: shape {state[n].shape} != {p.shape}")
            p.data = np.asarray(state[n], dtype=self.dtype).copy()

    # network ------------------------------------------------------------

    def _gru(self, gx, hprev, w_h):
        if self.fused:
            return nd.conv_gru_cell(gx, hprev, w_h)
        d = self.config.hidden
        gx = self._split_gates(gx, d)
        gh = nd.conv2d(hprev, w_h)
        z = nd.sigmoid(gx[0] + gh[..., :d])
        r = nd.sigmoid(gx[1] + gh[..., d : 2 * d])
        n = nd.tanh(gx[2] + r * gh[..., 2 * d :])
        return n + z * (hprev - n)

    @staticmethod
    def _split_gates(g, d):
        return g[..., :d], g[..., d : 2 * d], g[..., 2 * d :]

    def _check(self, features, locations):
        cfg = self.config
        shape = (cfg.obs_len, cfg.rows, cfg.cols, cfg.n_classes)
        if features.ndim != 5 or features.shape[1:] != shape:
            raise nd.ShapeError(f"features must be (N, {', '.join(map(str, shape))}), got {features.shape}")
        if locations.shape != (features.shape[0], cfg.obs_len, self.grid.n_cells):
            raise nd.ShapeError(
                f"locations must be (N, {cfg.obs_len}, {self.grid.n_cells}), got {locations.shape}"
            )

    def encode_history(self, features, locations) -> tuple[Tensor, Tensor]:
        """Run the conv-GRU over the observed steps.

        Returns the last hidden state ``(N, rows, cols, hidden)`` and the
        context, that state concatenated with all observed frames along
        channels.
        """
        V = features if isinstance(features, Tensor) else Tensor(np.asarray(features, dtype=self.dtype))
        y = locations if isinstance(locations, Tensor) else Tensor(np.asarray(locations, dtype=self.dtype))
        self._check(V, y)
        cfg, p = self.config, self.params
        n, h, rows, cols, k = V.shape
        d = cfg.hidden
        ymap = y.reshape(n, h, rows, cols, 1)
        parts = [V, ymap]
        if cfg.position_channels:
            pos = self._position_maps(y)
            parts.append(pos)
        x = nd.concat(parts, axis=-1).reshape(n * h, rows, cols, -1)
        gx = (nd.conv2d(x, p["enc_x.w"]) + p["enc_x.b"]).reshape(n, h, rows, cols, 3 * d)
        state = Tensor(np.zeros((n, rows, cols, d), dtype=self.dtype))
        for t in range(h):
            state = self._gru(gx[:, t], state, p["enc_h.w"])
        frames = nd.transpose(V, (0, 2, 3, 1, 4)).reshape(n, rows, cols, h * k)
        ctx = [state, frames]
        if cfg.position_channels:
            ctx.append(pos[:, -1])
        context = nd.concat(ctx, axis=-1)
        return state, context

    def _position_maps(self, y) -> Tensor:
        """Per step ``(N, h, rows, cols, 4)``: cell coordinates and expected agent position minus them."""
        cfg = self.config
        n, h, _ = y.shape
        size = np.asarray(self.grid.image_size)
        norm = (2.0 * self.centers / size - 1.0).astype(self.dtype)  # (HW, 2)
        coords = norm.reshape(1, 1, cfg.rows, cfg.cols, 2)
        agent = (y @ Tensor(norm)).reshape(n, h, 1, 1, 2)
        rel = agent - Tensor(coords)
        coord_b = Tensor(np.broadcast_to(coords, (n, h, cfg.rows, cfg.cols, 2)).copy())
        return nd.concat([coord_b, rel], axis=-1)

    def _decode(self, name, context, state, prev_maps):
        """Decoder pass; ``prev_maps`` is ``(N, P, rows, cols, 1)`` or None for context-only input."""
        p = self.params
        gx = nd.conv2d(context, p[f"{name}_x.w"]) + p[f"{name}_x.b"]
        if prev_maps is None:
            hs = []
            for _ in range(self.config.pred_len):
                state = self._gru(gx, state, p[f"{name}_h.w"])
                hs.append(state)
            return nd.stack(hs, axis=1)
        n, P, rows, cols, _ = prev_maps.shape
        gy = nd.conv2d(prev_maps.reshape(n * P, rows, cols, 1), p[f"{name}_y.w"])
        gates = gx.reshape(n, 1, rows, cols, -1) + gy.reshape(n, P, rows, cols, -1)
        hs = []
        for t in range(P):
            state = self._gru(gates[:, t], state, p[f"{name}_h.w"])
            hs.append(state)
        return nd.stack(hs, axis=1)  # (N, P, rows, cols, d)

    def _prev_maps(self, locations, teacher) -> Tensor | None:
        """Decoder inputs: last observed location followed by all but the last target."""
        cfg = self.config
        if cfg.decoder_input == "context":
            return None
        y = locations if isinstance(locations, Tensor) else Tensor(np.asarray(locations, dtype=self.dtype))
        t = teacher if isinstance(teacher, Tensor) else Tensor(np.asarray(teacher, dtype=self.dtype))
        if t.shape != (y.shape[0], cfg.pred_len, self.grid.n_cells):
            raise nd.ShapeError(
                f"teacher labels must be (N, {cfg.pred_len}, {self.grid.n_cells}), got {t.shape}"
            )
        prev = nd.concat([y[:, -1:], t[:, :-1]], axis=1)
        return prev.reshape(y.shape[0], cfg.pred_len, cfg.rows, cfg.cols, 1)

    def _coarse_head(self, hs) -> Tensor:
        n, P = hs.shape[:2]
        d = self.config.hidden
        logits = hs.reshape(-1, d) @ self.params["coarse_out.w"] + self.params["coarse_out.b"]
        return nd.softmax(logits.reshape(n, P, self.grid.n_cells), axis=-1)

    def decode_coarse(self, context, state, locations=None, teacher=None) -> Tensor:
        """Per-step softmax over cells, ``(N, P, HW)``, fed the ``teacher`` labels."""
        return self._coarse_head(self._decode("coarse", context, state, self._prev_maps(locations, teacher)))

    def decode_fine(self, context, state, locations=None, teacher=None) -> Tensor:
        """Per-step offsets from every cell centre, ``(N, P, HW, 2)`` pixels."""
        hs = self._decode("fine", context, state, self._prev_maps(locations, teacher))
        n, P = hs.shape[:2]
        p, d = self.params, self.config.hidden
        hidden = nd.relu(hs.reshape(-1, d) @ p["fine_mlp.w"] + p["fine_mlp.b"])
        raw = (hidden @ p["fine_out.w"] + p["fine_out.b"]).reshape(n, P, self.grid.n_cells, 2)
        # network output is in half-image units
        return raw * (0.5 * np.asarray(self.grid.image_size, dtype=self.dtype))

    def forward(self, features, locations, teacher=None, fine_teacher=None, fine_features=None,
                fine_locations=None) -> tuple[Tensor, Tensor]:
        """Training pass returning cell distributions and per-cell offsets.

        The coarse decoder is fed ``teacher``; the fine decoder is fed
        ``fine_teacher`` when given (the labels its offsets are regressed
        against), else ``teacher``. With ``fine_features`` and
        ``fine_locations`` the fine decoder runs on its own encoding of those
        inputs.
        """
        state, context = self.encode_history(features, locations)
        fine_teacher = teacher if fine_teacher is None else fine_teacher
        probs = self.decode_coarse(context, state, locations, teacher)
        if fine_features is None:
            return probs, self.decode_fine(context, state, locations, fine_teacher)
        fstate, fcontext = self.encode_history(fine_features, fine_locations)
        return probs, self.decode_fine(fcontext, fstate, fine_locations, fine_teacher)

    def coarse_only(self, features, locations, teacher=None) -> Tensor:
        state, context = self.encode_history(features, locations)
        return self.decode_coarse(context, state, locations, teacher)

    def rollout_cells(self, features, locations, sampler=None) -> tuple[np.ndarray, np.ndarray]:
        """Free-running coarse decode feeding back the model's own cells.

        ``sampler(probs_t) -> cells`` picks each step's cell; argmax by
        default. Returns the per-step distributions ``(N, P, HW)`` and the
        chosen cells ``(N, P)``.
        """
        cfg, p = self.config, self.params
        if cfg.decoder_input == "context":
            with nd.no_grad():
                probs = self.coarse_only(features, locations).data
            if sampler is None:
                return probs, np.argmax(probs, axis=-1)
            cells = np.stack([np.asarray(sampler(probs[:, t])) for t in range(cfg.pred_len)], axis=1)
            return probs, cells
        with nd.no_grad():
            state, context = self.encode_history(features, locations)
            y = np.asarray(locations.data if isinstance(locations, Tensor) else locations, dtype=self.dtype)
            n = y.shape[0]
            gx = nd.conv2d(context, p["coarse_x.w"]) + p["coarse_x.b"]
            prev = y[:, -1]
            probs, cells = [], []
            for _ in range(cfg.pred_len):
                gy = nd.conv2d(Tensor(prev.reshape(n, cfg.rows, cfg.cols, 1)), p["coarse_y.w"])
                state = self._gru(gx + gy, state, p["coarse_h.w"])
                pr = self._coarse_head(state.reshape(n, 1, cfg.rows, cfg.cols, cfg.hidden)).data[:, 0]
                c = np.argmax(pr, axis=-1) if sampler is None else np.asarray(sampler(pr))
                probs.append(pr)
                cells.append(c)
                prev = self.grid.one_hot(c, dtype=self.dtype)
        return np.stack(probs, axis=1), np.stack(cells, axis=1)

    def predict(self, features, locations, sampler=None) -> Prediction:
        """Free-running decode: each step conditions on the previously chosen cell.

        With a ``sampler`` the chosen cells are sampled rather than argmax,
        and the composed locations use those cells.
        """
        probs, cells = self.rollout_cells(features, locations, sampler)
        with nd.no_grad():
            state, context = self.encode_history(features, locations)
            y = locations.data if isinstance(locations, Tensor) else locations
            offsets = self.decode_fine(context, state, y, self.grid.one_hot(cells, dtype=self.dtype)).data
        return Prediction(probs, offsets, self.grid, cells=cells)

    # persistence --------------------------------------------------------

    def save(self, path, extra: dict | None = None) -> None:
        """Binary checkpoint: magic, version, JSON hyperparameter block, named tensors."""
        header = {"config": asdict(self.config), "dtype": self.dtype.name, "extra": extra or {}}
        blob = json.dumps(header, sort_keys=True).encode()
        out = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(blob)), blob,
               struct.pack("<I", len(self.params))]
        for name, t in self.params.items():
            raw = name.encode()
            out.append(struct.pack("<H", len(raw)) + raw)
            out.append(nd.encode_array(t.data, dtype=self.dtype.newbyteorder("<")))
        with open(path, "wb") as fh:
            fh.write(b"".join(out))

    @classmethod
    def load(cls, path) -> tuple["ConvGRUForecaster", dict]:
        buf = open(path, "rb").read()
        if buf[:8] != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint")
        version, n = struct.unpack_from("<II", buf, 8)
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: checkpoint version {version} != {CHECKPOINT_VERSION}")
        header = json.loads(buf[16 : 16 + n])
        off = 16 + n
        cfgd = header["config"]
        cfgd["image_size"] = tuple(cfgd["image_size"])
        model = cls(BackboneConfig(**cfgd), dtype=np.dtype(header["dtype"]))
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        state = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", buf, off)
            name = buf[off + 2 : off + 2 + ln].decode()
            arr, off = nd.decode_array(buf, off + 2 + ln, dtype=model.dtype.newbyteorder("<"))
            state[name] = arr
        model.load_state_dict(state)
        return model, header.get("extra", {})


# ---------------------------------------------------------------------------
# composition and losses


def compose_prediction(probs, offsets, grid: GridSpec) -> np.ndarray:
    """``Q_g + O_g`` with ``g`` the argmax cell (first index on ties)."""
    probs = np.asarray(probs)
    offsets = np.asarray(offsets)
    g = np.argmax(probs, axis=-1)
    picked = np.take_along_axis(offsets, g[..., None, None], axis=-2)[..., 0, :]
    return grid.centers[g] + picked


def compose_at_cells(cells, offsets, grid: GridSpec) -> np.ndarray:
    """``Q_g + O_g`` for explicitly chosen cells ``g``."""
    cells = np.asarray(cells, dtype=np.int64)
    picked = np.take_along_axis(np.asarray(offsets), cells[..., None, None], axis=-2)[..., 0, :]
    return grid.centers[cells] + picked


def loss_cls(probs: Tensor, labels, T: int) -> Tensor:
    """Cross-entropy against (possibly soft) cell labels, ``1/T`` normalised, batch mean."""
    labels = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    if labels.shape != probs.shape:
        raise nd.ShapeError(f"loss_cls: labels {labels.shape} vs predictions {probs.shape}")
    n = probs.shape[0]
    ll = nd.sum(nd.mul(Tensor(labels.astype(probs.dtype, copy=False)), nd.log(probs, eps=LOG_EPS)))
    return ll * (-1.0 / (T * n))


def per_sample_loss_cls(probs: np.ndarray, labels: np.ndarray, T: int) -> np.ndarray:
    """Plain-array version returning one loss per sample, shape ``(N,)``."""
    logp = np.log(np.maximum(probs, LOG_EPS))
    return -(labels * logp).sum(axis=(-1, -2)) / T


def regression_targets(future_pixels, grid: GridSpec) -> np.ndarray:
    """``L_t - Q_c`` for every step and cell, ``(N, P, HW, 2)``."""
    fp = np.asarray(future_pixels, dtype=np.float64)
    return fp[..., None, :] - grid.centers


def loss_reg(offsets: Tensor, future_pixels, grid: GridSpec, T: int) -> Tensor:
    """Smooth-L1 between predicted and true per-cell offsets, ``1/T`` normalised, batch mean."""
    target = regression_targets(future_pixels, grid).astype(offsets.dtype)
    if target.shape != offsets.shape:
        raise nd.ShapeError(f"loss_reg: targets {target.shape} vs offsets {offsets.shape}")
    return nd.sum(nd.smooth_l1(offsets, Tensor(target))) * (1.0 / (T * offsets.shape[0]))


def weight_penalty(params) -> Tensor:
    """Squared L2 norm of all parameters."""
    terms = [nd.sum(p * p) for p in params]
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


def total_loss(l_cls, l_reg, params, reg_weight: float = REG_WEIGHT, weight_decay: float = WEIGHT_DECAY) -> Tensor:
    """``L_cls + reg_weight * L_reg + weight_decay * ||theta||^2``."""
    out = nd.add(l_cls, nd.mul(l_reg, reg_weight))
    params = list(params)
    if weight_decay and params:
        out = out + weight_penalty(params) * weight_decay
    return out


# ---------------------------------------------------------------------------
# optimiser


def adadelta_step(params, grads, state: dict, lr: float = 0.3, rho: float = 0.95, eps: float = 1e-6) -> None:
    """In-place Adadelta update of ``params`` (arrays or tensors).

    ``state`` keeps the running averages of squared gradients and squared
    updates, keyed by position; it is filled on first use.
    """
    sq = state.setdefault("square_avg", [None] * len(params))
    acc = state.setdefault("acc_delta", [None] * len(params))
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        arr = p.data if isinstance(p, Tensor) else p
        if sq[i] is None:
            sq[i] = np.zeros_like(arr)
            acc[i] = np.zeros_like(arr)
        sq[i] *= rho
        sq[i] += (1 - rho) * g * g
        delta = np.sqrt(acc[i] + eps) / np.sqrt(sq[i] + eps) * g
        acc[i] *= rho
        acc[i] += (1 - rho) * delta * delta
        arr -= lr * delta
    state["step"] = state.get("step", 0) + 1


class Adadelta:
    def __init__(self, params, lr: float = 0.3, rho: float = 0.95, eps: float = 1e-6):
        self.params = list(params)
        self.lr, self.rho, self.eps = lr, rho, eps
        self.state: dict = {}

    def step(self) -> None:
        adadelta_step(self.params, [p.grad for p in self.params], self.state, self.lr, self.rho, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
