"""A toy dense single-stage detector head.

Each cell's ``k x k`` feature window (zero padded at the border) feeds one
affine scorer per anchor slot, producing ``C`` class logits and 4 box
deltas for every anchor.  Output rows follow anchor order: row-major cell,
then anchor slot.
"""

import struct

import numpy as np

from .exceptions import InputError

CHECKPOINT_MAGIC = b"ADLDET\x00\x00"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<8sIIIIIQ")


def window_features(grid, window):
    """Stack each cell's ``window x window`` neighbourhood: ``(H*W, k*k*F)``.

    Values are divided by ``k`` so the input norm, and with it the largest
    stable SGD step, does not grow with the window size.
    """
    h, w, f = grid.shape
    r = window // 2
    padded = np.zeros((h + 2 * r, w + 2 * r, f))
    padded[r:r + h, r:r + w] = grid
    cols = [padded[dy:dy + h, dx:dx + w] for dy in range(window) for dx in range(window)]
    return np.concatenate(cols, axis=2).reshape(h * w, window * window * f) / window


class DenseModel:
    """Parameters and forward/backward pass of the dense head.

    Parameters live in one flat float64 vector ``params`` (weights then
    biases) so the optimizer and checkpoints can treat them uniformly.
    """

    def __init__(self, num_classes, num_features, num_slots, window=3, params=None):
        if window < 1 or window % 2 == 0:
            raise InputError(f"window must be a positive odd integer, got {window}")
        self.num_classes = int(num_classes)
        self.num_features = int(num_features)
        self.num_slots = int(num_slots)
        self.window = int(window)
        self.in_dim = self.window * self.window * self.num_features
        self.out_dim = self.num_classes + 4
        self._w_size = self.in_dim * self.num_slots * self.out_dim
        size = self._w_size + self.num_slots * self.out_dim
        if params is None:
            params = np.zeros(size)
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (size,):
            raise InputError(f"expected {size} parameters, got {params.shape}")
        self.params = params.copy()

    @property
    def num_params(self):
        return self.params.size

    @property
    def weight(self):
        return self.params[:self._w_size].reshape(self.in_dim, self.num_slots * self.out_dim)

    @property
    def bias(self):
        return self.params[self._w_size:]

    def copy(self):
        return DenseModel(self.num_classes, self.num_features, self.num_slots, self.window, self.params)

    def initialize(self, rng, std=0.01, prior=0.01):
        """Small Gaussian weights; class biases start at the foreground prior."""
        self.params[:self._w_size] = rng.normal(0.0, std, self._w_size)
        bias = np.zeros((self.num_slots, self.out_dim))
        bias[:, :self.num_classes] = -np.log((1.0 - prior) / prior)
        self.params[self._w_size:] = bias.ravel()
        return self

    def features(self, grid):
        grid = np.asarray(grid, dtype=np.float64)
        if grid.ndim != 3 or grid.shape[2] != self.num_features:
            raise InputError(f"scene has {grid.shape[-1]} features per cell, model expects {self.num_features}")
        return window_features(grid, self.window)

    def forward_features(self, x):
        out = x @ self.weight + self.bias
        return out.reshape(-1, self.out_dim)

    def forward(self, grid):
        """``(n_anchors, C + 4)``: class logits followed by box deltas."""
        return self.forward_features(self.features(grid))

    def backward(self, x, grad_out):
        """Gradient of a scalar loss w.r.t. ``params`` given d loss / d output."""
        g = np.asarray(grad_out).reshape(x.shape[0], self.num_slots * self.out_dim)
        return np.concatenate([(x.T @ g).ravel(), g.sum(axis=0)])


def save_checkpoint(path, model: DenseModel):
    header = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, model.num_classes, model.num_slots,
                          model.window, model.num_features, model.num_params)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(model.params.astype("<f8").tobytes())


def load_checkpoint(path) -> DenseModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise InputError(f"{path}: truncated checkpoint")
    magic, version, c, a, k, f, count = _HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise InputError(f"{path}: not a detector checkpoint")
    if version != CHECKPOINT_VERSION:
        raise InputError(f"{path}: unsupported checkpoint version {version}")
    body = raw[_HEADER.size:]
    if len(body) != 8 * count:
        raise InputError(f"{path}: expected {count} parameters, file holds {len(body) // 8}")
    params = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return DenseModel(c, f, a, k, params)
