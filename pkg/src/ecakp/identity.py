"""Machine identity: attribute collection, fingerprints and drift matching.

A machine is described by six named attributes. Canonicalization makes the
fingerprint stable across cosmetic differences: values are whitespace-
trimmed and lowercased, an unreadable attribute becomes the literal
``"unavailable"``, and entries are ordered by attribute name.

The fingerprint carries both a whole-set digest (the node-lock identity)
and one digest per attribute, which lets a later activation tolerate a
bounded number of changed components without revealing raw values.
"""

from __future__ import annotations

import platform
import re
import subprocess
import uuid
from dataclasses import dataclass
from pathlib import Path
from typing import Final, Iterable, Mapping, Protocol

from .crypto import hash256
from .errors import IdentityError

EXPECTED_ATTRIBUTES: Final = (
    "cpu_model",
    "board_serial",
    "disk_serial",
    "mac_address",
    "os_family",
    "hostname",
)
UNAVAILABLE: Final = "unavailable"
DEFAULT_TOLERANCE: Final = 2


@dataclass(frozen=True)
class AttributeSet:
    """Canonical, name-sorted machine attributes."""

    entries: tuple[tuple[str, str], ...]

    def __post_init__(self) -> None:
        names = [name for name, _ in self.entries]
        if len(set(names)) != len(names):
            raise IdentityError("attribute names must be unique")
        if names != sorted(names):
            raise IdentityError("attribute entries must be sorted by name")
        for name, value in self.entries:
            if not name:
                raise IdentityError("attribute names must be non-empty")
            if value != _canonical_value(value):
                raise IdentityError(f"attribute {name!r} value is not canonical")

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, str | None]] | Mapping[str, str | None]) -> "AttributeSet":
        """Canonicalize arbitrary (name, value) pairs into a set."""
        if isinstance(pairs, Mapping):
            pairs = pairs.items()
        return cls(
            tuple(sorted((name, _canonical_value(value)) for name, value in pairs))
        )

    def value_of(self, name: str) -> str:
        for entry_name, value in self.entries:
            if entry_name == name:
                return value
        raise KeyError(name)

    def canonical_bytes(self) -> bytes:
        """One ``name=value`` line per entry, newline-terminated."""
        return b"".join(
            f"{name}={value}\n".encode("utf-8") for name, value in self.entries
        )


def _canonical_value(value: str | None) -> str:
    if value is None:
        return UNAVAILABLE
    value = value.strip().lower()
    return value if value else UNAVAILABLE


@dataclass(frozen=True)
class MachineFingerprint:
    """Hashed machine identity: whole-set digest plus per-attribute digests."""

    digest: bytes
    attribute_digests: tuple[tuple[str, bytes], ...]

    def digest_of(self, name: str) -> bytes | None:
        for entry_name, digest in self.attribute_digests:
            if entry_name == name:
                return digest
        return None

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.attribute_digests)


class SystemProbe(Protocol):
    """Source of raw attribute values; a fake probe serves tests."""

    def read_attributes(self) -> Mapping[str, str | None]: ...


class StaticProbe:
    """Probe that returns a fixed mapping; missing names stay unavailable."""

    def __init__(self, values: Mapping[str, str | None]) -> None:
        self._values = dict(values)

    def read_attributes(self) -> Mapping[str, str | None]:
        return dict(self._values)


def load_probe_file(path: str | Path) -> StaticProbe:
    """Read ``name=value`` lines into a static probe; '#' starts a comment."""
    values: dict[str, str] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        name, sep, value = line.partition("=")
        if not sep:
            raise IdentityError(f"probe file line is not name=value: {line!r}")
        values[name.strip()] = value
    return StaticProbe(values)


class HostProbe:
    """Best-effort attribute collection from the running machine."""

    def read_attributes(self) -> Mapping[str, str | None]:
        return {
            "cpu_model": _cpu_model(),
            "board_serial": _first_readable(
                "/sys/class/dmi/id/board_serial", "/sys/class/dmi/id/product_uuid"
            ),
            "disk_serial": _disk_serial(),
            "mac_address": _mac_address(),
            "os_family": platform.system() or None,
            "hostname": platform.node() or None,
        }


def _cpu_model() -> str | None:
    try:
        for line in Path("/proc/cpuinfo").read_text().splitlines():
            if line.lower().startswith("model name"):
                return line.partition(":")[2].strip() or None
    except OSError:
        pass
    return platform.processor() or None


def _first_readable(*paths: str) -> str | None:
    for path in paths:
        try:
            text = Path(path).read_text().strip()
        except OSError:
            continue
        if text:
            return text
    return None


def _disk_serial() -> str | None:
    try:
        for device in sorted(Path("/sys/block").iterdir()):
            serial = device / "serial"
            if serial.exists():
                text = serial.read_text().strip()
                if text:
                    return text
    except OSError:
        pass
    try:
        out = subprocess.run(
            ["lsblk", "-dno", "serial"], capture_output=True, text=True, timeout=5
        )
        for line in out.stdout.splitlines():
            if line.strip():
                return line.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return None


def _mac_address() -> str | None:
    node = uuid.getnode()
    # getnode falls back to a random multicast value when no MAC is found.
    if node & (1 << 40):
        return None
    raw = f"{node:012x}"
    return ":".join(raw[i : i + 2] for i in range(0, 12, 2))


def collect_attributes(probe: SystemProbe | None = None) -> AttributeSet:
    """Collect the six expected attributes through ``probe``.

    Names the probe does not supply are recorded as unavailable. A probe
    may cover only some attributes; a machine that yields none at all is
    rejected rather than fingerprinted as fully anonymous.

    Raises:
        IdentityError: every attribute came back unavailable.
    """
    probe = probe if probe is not None else HostProbe()
    try:
        raw = probe.read_attributes()
    except Exception as exc:
        raise IdentityError(f"attribute probe failed: {exc}") from exc
    attrs = AttributeSet.from_pairs(
        {name: raw.get(name) for name in EXPECTED_ATTRIBUTES}
    )
    if all(value == UNAVAILABLE for _, value in attrs.entries):
        raise IdentityError("no machine attribute could be collected")
    return attrs


def fingerprint(attrs: AttributeSet) -> MachineFingerprint:
    """Hash an attribute set into its machine fingerprint.

    The whole-set digest covers the canonical byte form; each attribute
    digest covers its own ``name=value`` line without the newline.
    """
    return MachineFingerprint(
        digest=hash256(attrs.canonical_bytes()),
        attribute_digests=tuple(
            (name, hash256(f"{name}={value}".encode("utf-8")))
            for name, value in attrs.entries
        ),
    )


def matches(stored: MachineFingerprint, current: AttributeSet, tolerance: int = DEFAULT_TOLERANCE) -> bool:
    """Decide whether ``current`` is the machine ``stored`` was taken on.

    Counts attribute digests that differ; a name present on only one side
    counts as a mismatch. Equal fingerprints match at any tolerance, and
    the result is monotone in ``tolerance``.

    Args:
        tolerance: highest mismatch count still accepted, at least 0.
    """
    if tolerance < 0:
        raise ValueError("tolerance must be non-negative")
    current_fp = fingerprint(current)
    if stored.digest == current_fp.digest:
        return True
    names = set(stored.names) | set(current_fp.names)
    mismatches = sum(
        1
        for name in names
        if stored.digest_of(name) != current_fp.digest_of(name)
    )
    return mismatches <= tolerance


_HEX_RE: Final = re.compile(r"\A[0-9a-fA-F]{64}\Z")


def parse_digest_hex(text: str) -> bytes:
    """Parse a 32-byte digest from hex; raises IdentityError otherwise."""
    if not _HEX_RE.match(text):
        raise IdentityError("digest must be 64 hex characters")
    return bytes.fromhex(text)
