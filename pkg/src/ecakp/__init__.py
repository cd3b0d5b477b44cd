"""Content protection toolkit: sealed containers, node-locked activation,
license-gated playback and a process guard.

The producer packs media into an encrypted, gzip-framed container tied to
a content id. An activation server enforces a per-copy policy against a
durable ledger and issues machine-locked licenses. The client activates
once, then plays offline: the content key unwraps only on a machine whose
fingerprint still matches, and playback runs behind a process sweep and a
closed network gate.
"""

from .container import (
    ContentId,
    EncryptedContainer,
    PackagingSecret,
    pack,
    parse_header,
    read_container,
    unpack,
    write_container,
)
from .errors import EcakpError
from .identity import (
    AttributeSet,
    MachineFingerprint,
    collect_attributes,
    fingerprint,
    matches,
)
from .licensing import LicenseFile, issue_license, unwrap_content_key, verify_license

__version__ = "0.1.0"

__all__ = [
    "AttributeSet",
    "ContentId",
    "EcakpError",
    "EncryptedContainer",
    "LicenseFile",
    "MachineFingerprint",
    "PackagingSecret",
    "__version__",
    "collect_attributes",
    "fingerprint",
    "issue_license",
    "matches",
    "pack",
    "parse_header",
    "read_container",
    "unpack",
    "unwrap_content_key",
    "verify_license",
    "write_container",
]
