import hashlib
from pathlib import Path

import numpy as np
import torch


# --------------------
# DIGESTS
# --------------------
def tensor_digest(tensor: torch.Tensor) -> str:
    """SHA-256 hex of the tensor's little-endian float32 bytes, row-major."""
    array = tensor.detach().to(torch.float32).contiguous().numpy()
    return hashlib.sha256(array.astype("<f4").tobytes(order="C")).hexdigest()


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def image_digest(image: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(image, dtype=np.uint8).tobytes()).hexdigest()


# --------------------
# SHORT FORM
# --------------------
def short_checksum(hash_hex: str) -> str:
    """First 16 hex chars grouped as XXXX-XXXX-XXXX-XXXX."""
    return "-".join([hash_hex[i:i + 4].upper() for i in range(0, 16, 4)])


def format_checksum(hash_hex: str) -> str:
    return f"{hash_hex}  ({short_checksum(hash_hex)})"
