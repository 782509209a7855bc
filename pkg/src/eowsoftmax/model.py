"""Staged MLP classifier with a K+1-way softmax head.

Parameters live in one flat float64 vector; per-layer weights and biases are
reshaped views into it. Stage ``s`` output is the relu activation after the
``s``-th hidden layer, and stage 0 is the raw input. Class indices are
0-based: ``0..K-1`` are the known classes and index ``K`` is the open-world
(uncertainty) slot.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import diffcore as dc

CHECKPOINT_FORMAT = "eowsoftmax-checkpoint"
CHECKPOINT_VERSION = 1


class EowClassifier:
    """Feed-forward network ``D -> h1 -> ... -> hS -> K+1``.

    ``confidence`` selects how :meth:`predict` scores a prediction:
    ``"open"`` reads the un-renormalised K+1-way softmax, ``"closed"`` takes
    a K-way softmax over the first K logits (used for baselines that never
    train the extra logit).
    """

    def __init__(self, widths, num_classes, rng=None, theta=None, confidence="open"):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError("need an input width and at least one stage width")
        if num_classes < 1:
            raise ValueError("num_classes must be positive")
        if confidence not in ("open", "closed"):
            raise ValueError(f"unknown confidence mode {confidence!r}")
        self.widths = widths
        self.num_classes = int(num_classes)
        self.confidence = confidence

        dims = list(zip(widths[:-1], widths[1:])) + [(widths[-1], self.num_classes + 1)]
        layout = []
        offset = 0
        for fan_in, fan_out in dims:
            layout.append((offset, fan_in, fan_out, offset + fan_in * fan_out))
            offset += fan_in * fan_out + fan_out
        self.layout = np.array(layout, dtype=np.int64)
        self.size = offset

        if theta is None:
            rng = np.random.default_rng() if rng is None else rng
            theta = np.zeros(offset)
            for w_off, fan_in, fan_out, _ in layout:
                n = fan_in * fan_out
                theta[w_off : w_off + n] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=n)
        else:
            theta = np.array(theta, dtype=np.float64)
            if theta.shape != (offset,):
                raise ValueError(f"theta has shape {theta.shape}, expected ({offset},)")
        self.theta = theta
        self._bind_views()

    def _bind_views(self):
        self.weights = []
        self.biases = []
        for w_off, fan_in, fan_out, b_off in self.layout:
            self.weights.append(self.theta[w_off : w_off + fan_in * fan_out].reshape(fan_in, fan_out))
            self.biases.append(self.theta[b_off : b_off + fan_out])

    @property
    def num_stages(self) -> int:
        return len(self.widths) - 1

    @property
    def input_dim(self) -> int:
        return self.widths[0]

    def stage_width(self, s: int) -> int:
        self._check_stage(s)
        return self.widths[s]

    def copy(self) -> "EowClassifier":
        return EowClassifier(self.widths, self.num_classes, theta=self.theta.copy(), confidence=self.confidence)

    def checksum(self) -> str:
        import hashlib

        return hashlib.sha256(self.theta.tobytes()).hexdigest()

    def _check_stage(self, s):
        if not 0 <= s <= self.num_stages:
            raise ValueError(f"stage {s} out of range 0..{self.num_stages}")

    def _check_width(self, x, s):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.widths[s]:
            raise ValueError(f"input width {x.shape[-1]} does not match stage {s} width {self.widths[s]}")
        return x, single

    # plain numpy paths

    def encode_to_stage(self, x, s: int) -> np.ndarray:
        self._check_stage(s)
        x, single = self._check_width(x, 0)
        for j in range(s):
            x = np.maximum(x @ self.weights[j] + self.biases[j], 0.0)
        return x[0] if single else x

    def head_from_stage(self, z, s: int) -> np.ndarray:
        self._check_stage(s)
        z, single = self._check_width(z, s)
        for j in range(s, self.num_stages):
            z = np.maximum(z @ self.weights[j] + self.biases[j], 0.0)
        out = z @ self.weights[-1] + self.biases[-1]
        return out[0] if single else out

    def logits(self, x) -> np.ndarray:
        return self.head_from_stage(x, 0)

    def probs(self, x) -> np.ndarray:
        return softmax(self.logits(x))

    def predict(self, x):
        """Return ``(label, confidence, uncertainty)`` arrays (scalars for a single input).

        Ties in the argmax resolve to the lowest class index.
        """
        return predict_from_logits(self.logits(x), self.confidence)

    # taped paths

    def bind(self, tape: dc.Tape) -> list[dc.Node]:
        """Record the current parameters as leaves: ``[W1, b1, ..., Wh, bh]``."""
        nodes = []
        for w, b in zip(self.weights, self.biases):
            nodes.append(tape.leaf(w))
            nodes.append(tape.leaf(b))
        return nodes

    def trace(self, params: list[dc.Node], z, s: int = 0) -> dc.Node:
        """Taped logits from a stage-``s`` input (a Node or an array treated as a constant)."""
        self._check_stage(s)
        tape = params[0].tape
        if not isinstance(z, dc.Node):
            z, _ = self._check_width(z, s)
            z = tape.constant(z)
        elif z.value.ndim != 2 or z.value.shape[1] != self.widths[s]:
            raise ValueError(f"latent width does not match stage {s}")
        for j in range(s, self.num_stages):
            z = dc.relu(dc.add_bias(dc.matmul(z, params[2 * j]), params[2 * j + 1]))
        return dc.add_bias(dc.matmul(z, params[-2]), params[-1])

    def trace_encode(self, params: list[dc.Node], x, s: int) -> dc.Node:
        self._check_stage(s)
        tape = params[0].tape
        if not isinstance(x, dc.Node):
            x, _ = self._check_width(x, 0)
            x = tape.constant(x)
        for j in range(s):
            x = dc.relu(dc.add_bias(dc.matmul(x, params[2 * j]), params[2 * j + 1]))
        return x

    def flat_grad(self, grads: list[np.ndarray]) -> np.ndarray:
        """Concatenate per-parameter gradients into the flat layout of ``theta``."""
        out = np.empty(self.size)
        for (w_off, fan_in, fan_out, b_off), gw, gb in zip(self.layout, grads[0::2], grads[1::2]):
            out[w_off : w_off + fan_in * fan_out] = gw.reshape(-1)
            out[b_off : b_off + fan_out] = gb
        return out


def forward(model: EowClassifier, x) -> np.ndarray:
    return model.logits(x)


def softmax(logits) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def predict_from_logits(logits, confidence="open"):
    logits = np.asarray(logits, dtype=np.float64)
    k = logits.shape[-1] - 1
    p = softmax(logits)
    uncertainty = p[..., k]
    if confidence == "closed":
        p = softmax(logits[..., :k])
    label = np.argmax(p[..., :k], axis=-1)
    conf = np.take_along_axis(p, np.asarray(label)[..., None], axis=-1)[..., 0]
    if logits.ndim == 1:
        return int(label), float(conf), float(uncertainty)
    return label, conf, uncertainty


def save_checkpoint(model: EowClassifier, path) -> None:
    """JSON header line followed by the raw little-endian float64 parameter vector."""
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "widths": model.widths,
        "num_classes": model.num_classes,
        "confidence": model.confidence,
        "size": model.size,
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        f.write(model.theta.astype("<f8").tobytes())


def load_checkpoint(path) -> EowClassifier:
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise ValueError("not a checkpoint file")
    try:
        header = json.loads(data[:nl])
    except json.JSONDecodeError as exc:
        raise ValueError("corrupt checkpoint header") from exc
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a checkpoint file")
    if header["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header['version']}")
    body = data[nl + 1 :]
    if len(body) != 8 * header["size"]:
        raise ValueError("checkpoint parameter block is truncated")
    theta = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return EowClassifier(header["widths"], header["num_classes"], theta=theta, confidence=header["confidence"])

