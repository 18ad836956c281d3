"""Phantom generation, NIfTI-1 I/O and intensity normalization."""

from .casedir import list_cases, read_case, read_dataset, read_manifest, write_case, write_manifest
from .nifti import (NiftiDatatypeError, NiftiMagicError, NiftiTruncatedError, read_nifti1,
                    write_nifti1)
from .phantom import (DEFAULT_CONTRAST, DEFAULT_GAINS, PhantomSpec, generate_phantom,
                      generate_phantom_set, phantom_specs)
from .volume import LABEL_ROLES, PHANTOM_ROLES, ROLES, Volume, concat_cases, normalize_intensities

__all__ = [
    "Volume", "normalize_intensities", "concat_cases", "LABEL_ROLES", "PHANTOM_ROLES", "ROLES",
    "PhantomSpec", "generate_phantom", "generate_phantom_set", "phantom_specs",
    "DEFAULT_CONTRAST", "DEFAULT_GAINS", "read_nifti1", "write_nifti1", "NiftiMagicError",
    "NiftiDatatypeError", "NiftiTruncatedError", "write_case", "read_case", "read_dataset",
    "list_cases", "read_manifest", "write_manifest",
]
