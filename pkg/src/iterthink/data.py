"""Synthetic prefix-sum instances: random bit strings and their running parity."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, TextIO

import numpy as np

__all__ = ["Instance", "Dataset", "oracle_prefix_parity", "generate_dataset", "random_instances", "batches", "dump_instances"]

TRAIN_FRACTION_NUM, TRAIN_FRACTION_DEN = 4, 5


@dataclass(frozen=True)
class Instance:
    bits: np.ndarray
    target: np.ndarray


def oracle_prefix_parity(bits) -> np.ndarray:
    """Running XOR along the last axis: ``target[i] = sum(bits[:i+1]) mod 2``."""
    b = np.asarray(bits, dtype=np.uint8)
    return np.bitwise_xor.accumulate(b, axis=-1) if b.size else b.copy()


def random_instances(n_bits: int, count: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """``count`` uniform bit strings of length ``n_bits`` and their targets."""
    rng = np.random.default_rng(seed)
    bits = rng.integers(0, 2, size=(count, n_bits), dtype=np.uint8)
    return bits, oracle_prefix_parity(bits)


@dataclass(frozen=True)
class Dataset:
    bits: np.ndarray  # [N, n] uint8
    targets: np.ndarray  # [N, n] uint8
    train_idx: np.ndarray
    val_idx: np.ndarray
    seed: int

    def __len__(self) -> int:
        return len(self.bits)

    def instance(self, i: int) -> Instance:
        return Instance(self.bits[i], self.targets[i])

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        idx = {"train": self.train_idx, "val": self.val_idx}[name]
        return self.bits[idx], self.targets[idx]


def generate_dataset(n_bits: int, count: int, seed: int) -> Dataset:
    if count < 5:
        raise ValueError(f"count must be >= 5 for an 80/20 split, got {count}")
    bits, targets = random_instances(n_bits, count, seed)
    n_train = count * TRAIN_FRACTION_NUM // TRAIN_FRACTION_DEN
    perm = np.random.default_rng([seed, 1]).permutation(count)
    return Dataset(bits, targets, np.sort(perm[:n_train]), np.sort(perm[n_train:]), seed)


def batches(dataset: Dataset, split: str, batch_size: int, shuffle_seed: int | None = None, epoch: int = 0
            ) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(x [B,1,n] float64, target [B,n] uint8)`` covering the split once.

    With ``shuffle_seed`` the order is a permutation determined by
    ``(shuffle_seed, epoch)``; without it, the stored order.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    bits, targets = dataset.split(split)
    order = np.arange(len(bits))
    if shuffle_seed is not None:
        order = np.random.default_rng([shuffle_seed, epoch]).permutation(len(bits))
    for start in range(0, len(order), batch_size):
        sel = order[start:start + batch_size]
        yield bits[sel][:, None, :].astype(np.float64), targets[sel]


def dump_instances(bits: np.ndarray, targets: np.ndarray, out: TextIO) -> None:
    """Write one ``bits<TAB>target`` line per instance in ASCII 0/1."""
    for b, t in zip(bits, targets):
        out.write("".join("01"[v] for v in b) + "\t" + "".join("01"[v] for v in t) + "\n")
