"""Prototypical-network head: prototypes, squared-distance scores, loss."""

from __future__ import annotations

import struct
from collections.abc import Hashable, Sequence
from dataclasses import dataclass

import numpy as np

BANK_MAGIC = b"PKPB"
BANK_VERSION = 1


@dataclass
class PrototypeBank:
    labels: list
    prototypes: np.ndarray  # (N, D)

    def __post_init__(self):
        self.prototypes = np.asarray(self.prototypes, dtype=np.float64)
        if self.prototypes.ndim != 2 or self.prototypes.shape[0] < 1:
            raise ValueError("prototypes must be a non-empty (N, D) matrix")
        if len(self.labels) != self.prototypes.shape[0]:
            raise ValueError("one label per prototype row required")
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("bank labels must be unique")

    @property
    def n_classes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]


def compute_prototypes(embeddings, labels: Sequence[Hashable]) -> PrototypeBank:
    """Mean embedding per label, rows in first-appearance order."""
    e = np.asarray(embeddings, dtype=np.float64)
    if len(labels) == 0 or e.size == 0:
        raise ValueError("cannot build prototypes from an empty support set")
    if e.ndim != 2 or e.shape[0] != len(labels):
        raise ValueError("embeddings must be (n, D) with one label per row")
    order = list(dict.fromkeys(labels))
    index = {lab: i for i, lab in enumerate(order)}
    rows = np.array([index[lab] for lab in labels])
    sums = np.zeros((len(order), e.shape[1]))
    np.add.at(sums, rows, e)
    counts = np.bincount(rows, minlength=len(order))
    return PrototypeBank(order, sums / counts[:, None])


def score(query, bank: PrototypeBank) -> np.ndarray:
    """Negative squared Euclidean distance to each prototype.

    Accepts one query (D,) or a batch (M, D); returns (N,) or (M, N).
    """
    q = np.asarray(query, dtype=np.float64)
    if q.shape[-1] != bank.dim:
        raise ValueError(f"query dimension {q.shape[-1]} != bank dimension {bank.dim}")
    diff = q[..., None, :] - bank.prototypes
    return -np.einsum("...nd,...nd->...n", diff, diff)


def predict(scores) -> int | np.ndarray:
    """Index of the highest score; ties go to the lowest index."""
    s = np.asarray(scores)
    if s.shape[-1] < 1:
        raise ValueError("need at least one score")
    out = np.argmax(s, axis=-1)
    return int(out) if out.ndim == 0 else out


def _check_labels(s: np.ndarray, y: np.ndarray) -> None:
    if s.ndim != 2 or len(y) != s.shape[0]:
        raise ValueError("need one true label per score vector")
    if np.any(y < 0) or np.any(y >= s.shape[1]):
        raise ValueError("true label outside the bank")


def log_softmax(s: np.ndarray) -> np.ndarray:
    shifted = s - s.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def episode_loss(scores_per_query, true_labels) -> float:
    """Summed cross-entropy of the true class over all queries."""
    s = np.asarray(scores_per_query, dtype=np.float64)
    y = np.asarray(true_labels, dtype=np.int64)
    _check_labels(s, y)
    logp = log_softmax(s)
    return float(-logp[np.arange(len(y)), y].sum())


def episode_loss_grad(scores_per_query, true_labels) -> np.ndarray:
    """d loss / d scores: softmax(s) - onehot(y), one row per query."""
    s = np.asarray(scores_per_query, dtype=np.float64)
    y = np.asarray(true_labels, dtype=np.int64)
    _check_labels(s, y)
    g = np.exp(log_softmax(s))
    g[np.arange(len(y)), y] -= 1.0
    return g


@dataclass
class EpisodeResult:
    loss: float
    accuracy: float
    grad_support: np.ndarray
    grad_query: np.ndarray
    scores: np.ndarray


def episode_forward_backward(support_emb, support_y, query_emb, query_y,
                             n_way: int | None = None) -> EpisodeResult:
    """Loss, in-episode accuracy and gradients w.r.t. support and query embeddings.

    Classes are the integers 0..n_way-1. For score s_ij = -|q_j - p_i|^2 and
    upstream G = dL/ds:
      dL/dq_j = -2 * sum_i G_ij (q_j - p_i)
      dL/dp_i =  2 * sum_j G_ij (q_j - p_i)
    and each support embedding of class i receives dL/dp_i / |S_i|.
    """
    zs = np.asarray(support_emb, dtype=np.float64)
    zq = np.asarray(query_emb, dtype=np.float64)
    ys = np.asarray(support_y, dtype=np.int64)
    yq = np.asarray(query_y, dtype=np.int64)
    n = int(ys.max()) + 1 if n_way is None else n_way
    counts = np.bincount(ys, minlength=n).astype(np.float64)
    if np.any(counts == 0):
        raise ValueError("every class needs at least one support embedding")
    protos = np.zeros((n, zs.shape[1]))
    np.add.at(protos, ys, zs)
    protos /= counts[:, None]

    diff = zq[:, None, :] - protos[None, :, :]          # (M, N, D)
    s = -np.einsum("mnd,mnd->mn", diff, diff)
    loss = episode_loss(s, yq)
    g = episode_loss_grad(s, yq)
    grad_q = -2.0 * np.einsum("mn,mnd->md", g, diff)
    grad_p = 2.0 * np.einsum("mn,mnd->nd", g, diff)
    grad_s = grad_p[ys] / counts[ys][:, None]
    acc = float(np.mean(np.argmax(s, axis=1) == yq))
    return EpisodeResult(loss, acc, grad_s, grad_q, s)


class BankFormatError(ValueError):
    pass


def encode_bank(bank: PrototypeBank) -> bytes:
    out = [BANK_MAGIC, struct.pack("<III", BANK_VERSION, bank.n_classes, bank.dim)]
    for lab in bank.labels:
        raw = str(lab).encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
    out.append(np.ascontiguousarray(bank.prototypes, dtype="<f8").tobytes())
    return b"".join(out)


def decode_bank(data: bytes) -> PrototypeBank:
    if data[:4] != BANK_MAGIC:
        raise BankFormatError("bad magic: not a prototype bank file")
    if len(data) < 16:
        raise BankFormatError("truncated prototype bank header")
    version, n, d = struct.unpack_from("<III", data, 4)
    if version != BANK_VERSION:
        raise BankFormatError(f"version mismatch: file has {version}, expected {BANK_VERSION}")
    pos = 16
    labels = []
    for _ in range(n):
        if pos + 4 > len(data):
            raise BankFormatError("truncated label table")
        (ln,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if pos + ln > len(data):
            raise BankFormatError("truncated label table")
        labels.append(data[pos:pos + ln].decode("utf-8"))
        pos += ln
    need = n * d * 8
    if len(data) - pos != need:
        raise BankFormatError(f"truncated prototype matrix: need {need} bytes, have {len(data) - pos}")
    protos = np.frombuffer(data, dtype="<f8", count=n * d, offset=pos).reshape(n, d).copy()
    return PrototypeBank(labels, protos)


def save_bank(bank: PrototypeBank, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_bank(bank))


def load_bank(path) -> PrototypeBank:
    with open(path, "rb") as fh:
        return decode_bank(fh.read())
