"""CNN + shared LSTM regressor for the eleven LV indices.

Index order everywhere: ``[A1, A2, D1, D2, D3, T1, T2, T3, T4, T5, T6]``.
Orientation group i (30, 90, 150 degrees) owns ``D_i``, ``T_i`` and ``T_{i+3}``
and contributes one of three area estimates that are averaged.
"""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import spt
from .spt import Variant
from .tensor import Tensor, RunningStats, load_checkpoint, save_checkpoint
from .tensor import ops

logger = logging.getLogger(__name__)

N_INDICES = 11
INDEX_NAMES = ("A1", "A2", "D1", "D2", "D3", "T1", "T2", "T3", "T4", "T5", "T6")
FAMILIES = {"areas": (0, 1), "dimensions": (2, 3, 4), "thicknesses": (5, 6, 7, 8, 9, 10)}
FRAMES = 20
HIDDEN = 100

# (kernel, channels at width 1.0) per conv layer
CONV_SPEC = ((7, 60), (5, 120), (5, 240), (3, 480), (3, 480))


class ConfigurationError(ValueError):
    pass


def channel_widths(width: float) -> tuple:
    return tuple(max(1, int(round(c * width))) for _, c in CONV_SPEC)


def assembly_matrix(variant: Variant) -> np.ndarray:
    """Constant map from concatenated head outputs to the 11-vector."""
    if variant is Variant.SPT_SC_L:
        P = np.zeros((N_INDICES, 15))
        for g in range(3):
            P[0, 5 * g + 0] = 1 / 3
            P[1, 5 * g + 1] = 1 / 3
            P[2 + g, 5 * g + 2] = 1
            P[5 + g, 5 * g + 3] = 1
            P[8 + g, 5 * g + 4] = 1
        return P
    groups = 2 if variant is Variant.SPT_OC_L else 1
    return np.hstack([np.eye(N_INDICES) / groups] * groups)


@dataclass(eq=False)
class LVNet:
    """Parameters, running statistics and forward pass of one variant."""

    variant: Variant
    width: float
    params: "OrderedDict[str, Tensor]"
    stats: list
    use_lstm: bool = True
    dropout: float = 0.5
    image_size: tuple = (80, 80)
    seed: int = 0
    front: spt.FrontEnd = field(init=False, repr=False)

    def __post_init__(self):
        self.variant = Variant.parse(self.variant)
        M, N = self.image_size
        if (M >> 4) != 5 or (N >> 4) != 5 or M % 16 or N % 16:
            raise ConfigurationError(
                f"spatial chain {M}x{N} -> /16 must end at the 5x5 map required by L2 pooling")
        self.front = spt.FrontEnd.build(self.variant, M, N)
        self._assembly = assembly_matrix(self.variant)

    # ------------------------------------------------------------- metadata
    @property
    def groups(self) -> int:
        return self.front.groups

    @property
    def head_shape(self) -> tuple:
        return tuple(self.params["head.weight"].shape)

    @property
    def dtype(self):
        return self.params["fc.weight"].dtype

    def astype(self, dtype) -> "LVNet":
        """Copy with parameters and running statistics cast to ``dtype``."""
        params = OrderedDict((k, Tensor(v.data.astype(dtype), requires_grad=v.requires_grad, name=k))
                             for k, v in self.params.items())
        stats = [RunningStats(s.mean.astype(dtype), s.var.astype(dtype), s.updates) for s in self.stats]
        return LVNet(self.variant, self.width, params, stats, self.use_lstm, self.dropout,
                     self.image_size, self.seed)

    def copy(self) -> "LVNet":
        return self.astype(self.dtype)

    def header(self) -> dict:
        return {"variant": self.variant.value, "width_multiplier": self.width,
                "use_lstm": self.use_lstm, "dropout": self.dropout,
                "image_size": list(self.image_size), "seed": self.seed}

    # ---------------------------------------------------------------- forward
    def cnn_forward(self, x, train: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        """(B', C, 80, 80) -> (B', 100) feature vectors."""
        p = self.params
        h = x
        for i, (k, _) in enumerate(CONV_SPEC, start=1):
            h = ops.conv2d(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"], stride=1, padding=k // 2)
            h = ops.batch_norm(h, p[f"bn{i}.gamma"], p[f"bn{i}.beta"], self.stats[i - 1], train)
            h = ops.relu(h)
            if i < len(CONV_SPEC):
                h = ops.max_pool2(h)
        h = ops.l2_pool(h)
        h = ops.reshape(h, (h.shape[0], h.shape[1]))
        h = ops.linear(h, p["fc.weight"], p["fc.bias"])
        return ops.dropout(h, self.dropout, rng, train)

    def organize(self, frames) -> Tensor:
        """Raw slices (S, T, M, N) -> network input (S*T*G, C, M, N), differentiable."""
        frames = frames if isinstance(frames, Tensor) else Tensor(np.asarray(frames, dtype=self.dtype))
        S, T = frames.shape[:2]
        flat = ops.reshape(frames, (S * T,) + tuple(self.image_size))
        return ops.linear_map(flat, self.front.forward, self.front.adjoint, op="spt_front_end")

    def sequence_forward(self, organized, n_subjects: int, train: bool = False,
                         rng: Optional[np.random.Generator] = None, return_features: bool = False):
        """Organised inputs for all frames -> predictions (S, T, 11).

        Items of ``organized`` are ordered (subject, frame, group).
        """
        G = self.groups
        n_items = organized.shape[0]
        if n_items % (n_subjects * G):
            raise ValueError("organised batch size is not a multiple of subjects x groups")
        T = n_items // (n_subjects * G)
        if T != FRAMES:
            raise ValueError(f"expected {FRAMES} frames per subject, got {T}")
        d = self.cnn_forward(organized, train, rng)
        d = ops.reshape(d, (n_subjects, T, G, HIDDEN))
        p = self.params
        lstm_w = {k.split(".", 1)[1]: v for k, v in p.items() if k.startswith("lstm.")}
        W, b = p["head.weight"], p["head.bias"]
        h = c = None
        preds = []
        for t in range(T):
            dt = ops.reshape(d[:, t], (n_subjects * G, HIDDEN))
            if self.use_lstm:
                if h is None:
                    h = Tensor(np.zeros(dt.shape, dtype=dt.dtype))
                    c = Tensor(np.zeros(dt.shape, dtype=dt.dtype))
                h, c = ops.lstm_cell(dt, h, c, lstm_w)
                ht = h
            else:
                ht = dt
            ht = ops.reshape(ht, (n_subjects, G, HIDDEN))
            outs = [ops.linear(ht[:, g], W[g], b[g]) for g in range(W.shape[0])]
            heads = ops.concat(outs, axis=1) if len(outs) > 1 else outs[0]
            preds.append(ops.matmul(heads, self._assembly.T.astype(heads.dtype)))
        y = ops.stack(preds, axis=1)
        return (y, d) if return_features else y

    def forward(self, frames, train: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        """Raw slices (S, 20, M, N) -> normalised index predictions (S, 20, 11)."""
        frames = frames if isinstance(frames, Tensor) else Tensor(np.asarray(frames, dtype=self.dtype))
        return self.sequence_forward(self.organize(frames), frames.shape[0], train, rng)

    def predict(self, frames, batch_subjects: int = 4) -> np.ndarray:
        """Eval-mode predictions without recording a graph."""
        frames = np.asarray(frames, dtype=self.dtype)
        out = [self.forward(frames[s:s + batch_subjects]).data
               for s in range(0, len(frames), batch_subjects)]
        return np.concatenate(out, axis=0)

    # ---------------------------------------------------------- persistence
    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        arrays = OrderedDict((k, v.data) for k, v in self.params.items())
        for i, s in enumerate(self.stats, start=1):
            arrays[f"bn{i}.running_mean"] = s.mean
            arrays[f"bn{i}.running_var"] = s.var
            arrays[f"bn{i}.updates"] = np.array([s.updates], dtype=np.float64)
        return arrays

    def save(self, path, extra: Optional[dict] = None, header: Optional[dict] = None) -> None:
        arrays = self.state_arrays()
        arrays.update(extra or {})
        save_checkpoint(path, arrays, {**self.header(), **(header or {})})

    @classmethod
    def load(cls, path) -> tuple["LVNet", dict, dict]:
        """Return ``(model, header, extra_arrays)``."""
        header, arrays = load_checkpoint(path)
        params = OrderedDict()
        stats = []
        for name, arr in list(arrays.items()):
            if name.startswith("bn") and ".running_" in name or name.endswith(".updates"):
                continue
            if name.split(".")[0] in _PARAM_PREFIXES:
                params[name] = Tensor(arrays.pop(name), requires_grad=True, name=name)
        for i in range(1, len(CONV_SPEC) + 1):
            stats.append(RunningStats(arrays.pop(f"bn{i}.running_mean"), arrays.pop(f"bn{i}.running_var"),
                                      int(arrays.pop(f"bn{i}.updates")[0])))
        model = cls(Variant.parse(header["variant"]), float(header["width_multiplier"]), params, stats,
                    bool(header.get("use_lstm", True)), float(header.get("dropout", 0.5)),
                    tuple(header.get("image_size", (80, 80))), int(header.get("seed", 0)))
        return model, header, arrays


_PARAM_PREFIXES = {f"conv{i}" for i in range(1, 6)} | {f"bn{i}" for i in range(1, 6)} | {"fc", "lstm", "head"}


def build_variant(variant, width_multiplier: float = 1.0, seed: int = 0, dtype=np.float32,
                  use_lstm: bool = True, dropout: float = 0.5, image_size=(80, 80)) -> LVNet:
    """Initialise a variant deterministically from ``seed``.

    Conv and fc weights use He fan-in normal init, LSTM weights uniform
    in +-1/sqrt(C), heads normal with std 1/sqrt(C); all biases start at 0.
    """
    variant = Variant.parse(variant)
    rng = np.random.default_rng(seed)
    front = spt.FrontEnd.build(variant, *image_size)
    cin = front.channels
    widths = channel_widths(width_multiplier)
    params: OrderedDict = OrderedDict()

    def add(name, arr):
        params[name] = Tensor(np.asarray(arr, dtype=dtype), requires_grad=True, name=name)

    for i, ((k, _), cout) in enumerate(zip(CONV_SPEC, widths), start=1):
        fan_in = cin * k * k
        add(f"conv{i}.weight", rng.standard_normal((cout, cin, k, k)) * np.sqrt(2.0 / fan_in))
        add(f"conv{i}.bias", np.zeros(cout))
        add(f"bn{i}.gamma", np.ones(cout))
        add(f"bn{i}.beta", np.zeros(cout))
        cin = cout
    add("fc.weight", rng.standard_normal((HIDDEN, cin)) * np.sqrt(2.0 / cin))
    add("fc.bias", np.zeros(HIDDEN))
    bound = 1.0 / np.sqrt(HIDDEN)
    for gate in ("f", "in", "out", "c"):
        add(f"lstm.W_{gate}", rng.uniform(-bound, bound, (HIDDEN, 2 * HIDDEN)))
    for gate in ("f", "in", "out", "c"):
        add(f"lstm.b_{gate}", np.zeros(HIDDEN))
    if variant is Variant.SPT_SC_L:
        heads, outs = 3, 5
    else:
        heads, outs = front.groups, N_INDICES
    add("head.weight", rng.standard_normal((heads, outs, HIDDEN)) / np.sqrt(HIDDEN))
    add("head.bias", np.zeros((heads, outs)))
    stats = [RunningStats.init(c, dtype) for c in widths]
    return LVNet(variant, float(width_multiplier), params, stats, use_lstm, dropout,
                 tuple(image_size), seed)


def count_params(model: LVNet) -> "OrderedDict[str, int]":
    """Per-layer parameter counts of the CNN branch (conv bias and BN affine pairs included),
    followed by ``cnn_total``, ``lstm``, ``heads`` and ``total``."""
    p = model.params
    counts: OrderedDict = OrderedDict()
    for i in range(1, len(CONV_SPEC) + 1):
        counts[f"conv{i}"] = sum(p[n].size for n in (f"conv{i}.weight", f"conv{i}.bias",
                                                     f"bn{i}.gamma", f"bn{i}.beta"))
        counts[f"pool{i}" if i < len(CONV_SPEC) else "l2pool"] = 0
    counts["fc"] = p["fc.weight"].size + p["fc.bias"].size
    counts["cnn_total"] = sum(counts.values())
    counts["lstm"] = sum(v.size for k, v in p.items() if k.startswith("lstm."))
    counts["heads"] = p["head.weight"].size + p["head.bias"].size
    counts["total"] = counts["cnn_total"] + counts["lstm"] + counts["heads"]
    return counts


def input_shape_label(variant) -> str:
    fe = spt.FrontEnd.build(Variant.parse(variant))
    b, c, m, n = fe.input_shape(1)
    return f"{b}×{c}×{m}×{n}" if b > 1 else f"{c}×{m}×{n}"


def output_shape_label(variant) -> str:
    variant = Variant.parse(variant)
    if variant is Variant.SPT_SC_L:
        return "5×3"
    g = spt.FrontEnd.build(variant).groups
    return f"{N_INDICES}×{g}"
