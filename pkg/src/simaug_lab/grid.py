"""Spatial grid over the image plane used for coarse location labels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class GridSpec:
    """``cols x rows`` cells tiling an image of ``image_size = (width, height)`` pixels.

    Cells are numbered row-major, ``c = row * cols + col``.
    """

    cols: int = 12
    rows: int = 6
    image_size: tuple[float, float] = (480.0, 240.0)

    def __post_init__(self):
        if self.cols < 1 or self.rows < 1:
            raise ValueError(f"grid extents must be positive, got {self.cols}x{self.rows}")
        if min(self.image_size) <= 0:
            raise ValueError(f"image size must be positive, got {self.image_size}")
        object.__setattr__(self, "image_size", (float(self.image_size[0]), float(self.image_size[1])))

    @classmethod
    def parse(cls, text: str, image_size=(480.0, 240.0)) -> "GridSpec":
        """Parse ``"36x18"`` as 36 columns by 18 rows."""
        try:
            cols, rows = (int(v) for v in text.lower().split("x"))
        except ValueError:
            raise ValueError(f"grid must look like COLSxROWS, got {text!r}") from None
        return cls(cols, rows, image_size)

    @property
    def n_cells(self) -> int:
        return self.cols * self.rows

    @property
    def cell_size(self) -> tuple[float, float]:
        return self.image_size[0] / self.cols, self.image_size[1] / self.rows

    @property
    def centers(self) -> np.ndarray:
        """Cell centers ``Q``, shape ``(n_cells, 2)`` in pixels."""
        cw, ch = self.cell_size
        rr, cc = np.meshgrid(np.arange(self.rows), np.arange(self.cols), indexing="ij")
        return np.stack([(cc.ravel() + 0.5) * cw, (rr.ravel() + 0.5) * ch], axis=1)

    def to_dict(self) -> dict:
        return {"cols": self.cols, "rows": self.rows, "image_size": list(self.image_size)}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(int(d["cols"]), int(d["rows"]), tuple(d["image_size"]))

    def contains(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        w, h = self.image_size
        return (p[..., 0] >= 0) & (p[..., 0] <= w) & (p[..., 1] >= 0) & (p[..., 1] <= h)

    def cell_index(self, points) -> np.ndarray:
        """Containing cell of each pixel; boundary points go to the smaller index.

        Raises
        ------
        ValueError
            If any point lies outside the image.
        """
        p = np.asarray(points, dtype=np.float64)
        if not np.all(self.contains(p)):
            bad = p[~self.contains(p)]
            raise ValueError(f"location outside the {self.image_size} image: {bad[:3].tolist()}")
        cw, ch = self.cell_size
        col = np.maximum(np.ceil(p[..., 0] / cw) - 1, 0).astype(np.int64)
        row = np.maximum(np.ceil(p[..., 1] / ch) - 1, 0).astype(np.int64)
        return np.minimum(row, self.rows - 1) * self.cols + np.minimum(col, self.cols - 1)

    def one_hot(self, cells, dtype=np.float32) -> np.ndarray:
        cells = np.asarray(cells, dtype=np.int64)
        out = np.zeros(cells.shape + (self.n_cells,), dtype=dtype)
        np.put_along_axis(out, cells[..., None], 1.0, axis=-1)
        return out

    def encode_location(self, point, dtype=np.float32) -> np.ndarray:
        """One-hot over the ``n_cells`` cells for one or many pixel locations."""
        return self.one_hot(self.cell_index(point), dtype=dtype)

    def mirror_cells(self, cells) -> np.ndarray:
        """Cell index after a horizontal flip: column ``cols - 1 - col``."""
        cells = np.asarray(cells, dtype=np.int64)
        row, col = np.divmod(cells, self.cols)
        return row * self.cols + (self.cols - 1 - col)
