"""On-disk case layout: one ``.nii`` per channel plus a channel-role manifest.

``case_dir/channels.tsv`` holds UTF-8 lines ``index<TAB>role``; channel ``i``
lives in ``case_dir/ch{i}.nii``.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..errors import ContractViolation, ParseError
from .nifti import read_nifti1, write_nifti1
from .volume import ROLES, Volume

MANIFEST_NAME = "channels.tsv"


def write_manifest(path, roles) -> None:
    Path(path).write_text("".join(f"{i}\t{r}\n" for i, r in enumerate(roles)), encoding="utf-8")


def read_manifest(path) -> list[str]:
    roles = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0].strip().isdigit():
            raise ParseError(f"{MANIFEST_NAME} line {n}", f"expected 'index<TAB>role', got {line!r}")
        idx, role = int(parts[0]), parts[1].strip()
        if role not in ROLES:
            raise ParseError(f"{MANIFEST_NAME} line {n}", f"unknown role {role!r}")
        roles[idx] = role
    if sorted(roles) != list(range(len(roles))):
        raise ParseError(MANIFEST_NAME, f"channel indices must be 0..{len(roles) - 1}")
    return [roles[i] for i in range(len(roles))]


def write_case(volume: Volume, case_dir) -> Path:
    if volume.data.shape[0] != 1:
        raise ContractViolation("write_case expects a single-case volume (B = 1)")
    case_dir = Path(case_dir)
    case_dir.mkdir(parents=True, exist_ok=True)
    for i in range(volume.data.shape[1]):
        write_nifti1(volume.data[0, i], case_dir / f"ch{i}.nii", volume.spacing_mm)
    write_manifest(case_dir / MANIFEST_NAME, volume.channel_roles)
    return case_dir


def read_case(case_dir) -> Volume:
    case_dir = Path(case_dir)
    roles = read_manifest(case_dir / MANIFEST_NAME)
    chans = [read_nifti1(case_dir / f"ch{i}.nii") for i in range(len(roles))]
    extents = {c.extent for c in chans}
    if len(extents) != 1:
        raise ParseError(str(case_dir), f"channels have different extents {sorted(extents)}")
    data = np.concatenate([c.data for c in chans], axis=1)
    return Volume(data, chans[0].spacing_mm, roles)


def list_cases(data_dir) -> list[Path]:
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise FileNotFoundError(f"data directory {data_dir} does not exist")
    return sorted(p.parent for p in data_dir.glob(f"*/{MANIFEST_NAME}"))


def read_dataset(data_dir) -> list[Volume]:
    cases = list_cases(data_dir)
    if not cases:
        raise ContractViolation(f"no cases (*/{MANIFEST_NAME}) under {data_dir}")
    return [read_case(c) for c in cases]
