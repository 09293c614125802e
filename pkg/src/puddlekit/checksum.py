"""CRC-32C (Castagnoli), the checksum used by the log format.

A numba-compiled kernel is used when available since log append/verify is
the hottest path in the runtime; a table-driven pure-Python fallback keeps
the package importable without a working JIT (set PUDDLEKIT_NO_NUMBA=1 to
force it).
"""

import os

import numpy as np

_POLY = 0x82F63B78  # reflected Castagnoli polynomial


def _make_table():
    table = np.empty(256, dtype=np.uint32)
    for i in range(256):
        c = i
        for _ in range(8):
            c = (c >> 1) ^ _POLY if c & 1 else c >> 1
        table[i] = c
    return table


_TABLE = _make_table()
_TABLE_LIST = [int(x) for x in _TABLE]


def _crc32c_py(data: bytes, crc: int = 0) -> int:
    crc ^= 0xFFFFFFFF
    table = _TABLE_LIST
    for b in data:
        crc = (crc >> 8) ^ table[(crc ^ b) & 0xFF]
    return crc ^ 0xFFFFFFFF


_nb_kernel = None
if not os.environ.get("PUDDLEKIT_NO_NUMBA"):
    try:
        from numba import njit

        @njit(cache=True)
        def _kernel(data, table):
            crc = np.uint32(0xFFFFFFFF)
            for i in range(len(data)):
                crc = (crc >> np.uint32(8)) ^ table[
                    (crc ^ np.uint32(data[i])) & np.uint32(0xFF)
                ]
            return crc ^ np.uint32(0xFFFFFFFF)

        _nb_kernel = _kernel
    except Exception:  # pragma: no cover - numba missing or broken
        _nb_kernel = None


def crc32c(data) -> int:
    """Checksum of a bytes-like object."""
    if _nb_kernel is not None:
        return int(_nb_kernel(np.frombuffer(data, dtype=np.uint8), _TABLE))
    return _crc32c_py(bytes(data))
