"""Deterministic synthetic traffic for experiments and tests.

Each class is a parametric profile: a shared protocol-like preamble,
a class-specific byte motif at a fixed offset, packet length and flow
length distributions, and a burst pattern.  The same seed always
produces the same flows.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError
from .flows import (FLOW_PACKETS, PACKET_BYTES, FlowTensor, LabeledFlow,
                    SOURCE_SYNTHETIC)

# all classes share this prefix so separation has to come from the
# motif region, not from byte 0
PREAMBLE = bytes([0x16, 0x03, 0x01, 0x2A])


@dataclass(frozen=True)
class SyntheticProfile:
    """Per-class generation parameters."""

    class_name: str
    motif: bytes
    motif_offset: int = 16
    packet_len_mean: float = 140.0
    packet_len_std: float = 25.0
    flow_len_low: int = 6
    flow_len_high: int = 30
    noise_rate: float = 0.05
    burst_period: int = 0        # 0 disables the long-packet burst
    burst_scale: float = 1.0

    def validate(self) -> None:
        if not self.class_name:
            raise ConfigError("profile needs a class_name")
        if not self.motif:
            raise ConfigError(f"{self.class_name}: empty motif")
        if self.motif_offset < len(PREAMBLE):
            raise ConfigError(
                f"{self.class_name}: motif overlaps the shared preamble")
        if self.motif_offset + len(self.motif) > PACKET_BYTES:
            raise ConfigError(
                f"{self.class_name}: motif runs past {PACKET_BYTES} bytes")
        if not (0.0 <= self.noise_rate < 1.0):
            raise ConfigError(f"{self.class_name}: noise_rate out of range")
        if not (1 <= self.flow_len_low <= self.flow_len_high <= FLOW_PACKETS):
            raise ConfigError(f"{self.class_name}: bad flow length range")


def _check_pool(profiles: Sequence[SyntheticProfile]) -> None:
    names = [p.class_name for p in profiles]
    if len(set(names)) != len(names):
        raise DataError(f"duplicate class names in profile pool: {names}")
    for p in profiles:
        p.validate()
    for i, a in enumerate(profiles):
        for b in profiles[i + 1:]:
            if a.motif == b.motif and a.motif_offset == b.motif_offset:
                raise DataError(
                    f"profiles {a.class_name} and {b.class_name} share the "
                    f"same motif at the same offset")


def generate_flow(profile: SyntheticProfile,
                  rng: np.random.Generator) -> FlowTensor:
    """Draw one flow from a profile."""
    n_packets = int(rng.integers(profile.flow_len_low,
                                 profile.flow_len_high + 1))
    data = np.zeros((FLOW_PACKETS, PACKET_BYTES), dtype=np.float32)
    min_len = profile.motif_offset + len(profile.motif)
    for i in range(n_packets):
        length = rng.normal(profile.packet_len_mean, profile.packet_len_std)
        if profile.burst_period > 0 and i % profile.burst_period == 0:
            length *= profile.burst_scale
        length = int(np.clip(length, min_len, PACKET_BYTES))
        pkt = np.zeros(PACKET_BYTES, dtype=np.uint8)
        pkt[:len(PREAMBLE)] = np.frombuffer(PREAMBLE, dtype=np.uint8)
        motif = np.frombuffer(profile.motif, dtype=np.uint8)
        pkt[profile.motif_offset:profile.motif_offset + motif.size] = motif
        # low-amplitude filler past the motif keeps packets non-trivial
        tail_start = profile.motif_offset + motif.size
        if length > tail_start:
            pkt[tail_start:length] = rng.integers(
                1, 32, size=length - tail_start, dtype=np.uint8)
        if profile.noise_rate > 0.0:
            flip = rng.random(length) < profile.noise_rate
            if flip.any():
                pkt[:length][flip] = rng.integers(
                    0, 256, size=int(flip.sum()), dtype=np.uint8)
        data[i, :length] = pkt[:length].astype(np.float32) / 255.0
    return FlowTensor(data=data, packet_count=n_packets)


def generate_synthetic(profiles: Sequence[SyntheticProfile],
                       flows_per_class: int,
                       seed: int) -> list[LabeledFlow]:
    """Generate flows_per_class flows for every profile, class-major.

    Per-class streams are seeded independently from (seed, class index)
    so adding a class never shifts the data of earlier classes.
    """
    _check_pool(profiles)
    if flows_per_class <= 0:
        raise DataError("flows_per_class must be positive")
    out: list[LabeledFlow] = []
    for idx, profile in enumerate(profiles):
        rng = np.random.default_rng([seed, idx])
        for _ in range(flows_per_class):
            out.append(LabeledFlow(tensor=generate_flow(profile, rng),
                                   label=profile.class_name,
                                   source=SOURCE_SYNTHETIC))
    return out


def default_profile_pool(n_classes: int = 6) -> list[SyntheticProfile]:
    """A deterministic pool of distinct class profiles.

    Every class gets a 16-byte motif at its own offset so no two classes
    collide in byte position; length and burst parameters vary per class
    so classes differ in more than content.
    """
    if not (2 <= n_classes <= 16):
        raise ConfigError("n_classes must be between 2 and 16")
    profiles = []
    for idx in range(n_classes):
        motif = bytes((((idx * 53 + 17) * (j + 3) + 29 * j) % 199) + 45
                      for j in range(16))
        profiles.append(SyntheticProfile(
            class_name=f"class_{chr(ord('a') + idx)}",
            motif=motif,
            motif_offset=16 + 6 * idx,
            packet_len_mean=120.0 + 8.0 * idx,
            packet_len_std=14.0 + 2.0 * (idx % 3),
            flow_len_low=5 + idx % 3,
            flow_len_high=22 + 2 * idx,
            noise_rate=0.04,
            burst_period=0 if idx % 2 == 0 else 4 + idx % 3,
            burst_scale=1.35,
        ))
    return profiles


# ---------------------------------------------------------------------------
# profile files

def save_profiles(profiles: Sequence[SyntheticProfile],
                  path: str | Path) -> None:
    """Write profiles as a JSON document (motifs hex encoded)."""
    doc = []
    for p in profiles:
        rec = asdict(p)
        rec["motif"] = p.motif.hex()
        doc.append(rec)
    Path(path).write_text(json.dumps({"profiles": doc}, indent=2,
                                     sort_keys=True) + "\n",
                          encoding="utf-8")


_PROFILE_FIELDS = {f for f in SyntheticProfile.__dataclass_fields__}


def load_profiles(path: str | Path) -> list[SyntheticProfile]:
    """Load a profile pool, rejecting unknown keys."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"profile file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(doc, dict) or "profiles" not in doc:
        raise ConfigError(f"{path}: expected an object with a 'profiles' list")
    profiles = []
    for i, rec in enumerate(doc["profiles"]):
        if not isinstance(rec, dict):
            raise ConfigError(f"{path}: profile {i} is not an object")
        unknown = set(rec) - _PROFILE_FIELDS
        if unknown:
            raise ConfigError(
                f"{path}: profile {i} has unknown keys: {sorted(unknown)}")
        rec = dict(rec)
        try:
            rec["motif"] = bytes.fromhex(rec["motif"])
        except (KeyError, TypeError, ValueError):
            raise ConfigError(f"{path}: profile {i} needs a hex motif") from None
        try:
            profile = SyntheticProfile(**rec)
        except TypeError as exc:
            raise ConfigError(f"{path}: profile {i}: {exc}") from None
        profile.validate()
        profiles.append(profile)
    _check_pool(profiles)
    return profiles


def train_test_split(flows: Sequence[LabeledFlow], test_fraction: float,
                     seed: int) -> tuple[list[LabeledFlow], list[LabeledFlow]]:
    """Per-label shuffled split so both sides keep every label."""
    if not (0.0 < test_fraction < 1.0):
        raise ConfigError("test_fraction must be in (0, 1)")
    by_label: dict[str, list[LabeledFlow]] = {}
    for f in flows:
        by_label.setdefault(f.label, []).append(f)
    rng = np.random.default_rng(seed)
    train: list[LabeledFlow] = []
    test: list[LabeledFlow] = []
    for label in sorted(by_label):
        group = by_label[label]
        order = rng.permutation(len(group))
        n_test = max(1, int(round(len(group) * test_fraction)))
        if n_test >= len(group):
            raise DataError(f"label {label!r} has too few flows to split")
        test_idx = set(order[:n_test].tolist())
        for i, flow in enumerate(group):
            (test if i in test_idx else train).append(flow)
    return train, test
