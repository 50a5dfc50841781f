"""Container serialization and mesh file I/O."""

from .container import (
    FORMAT_VERSION,
    container_records,
    decode_container,
    encode_container,
    load_container,
    model_from_records,
    read_records,
    save_container,
    write_records,
)
from .mesh import TriangleMesh, read_mesh, write_mesh

__all__ = [
    "FORMAT_VERSION",
    "TriangleMesh",
    "container_records",
    "decode_container",
    "encode_container",
    "load_container",
    "model_from_records",
    "read_records",
    "read_mesh",
    "save_container",
    "write_mesh",
    "write_records",
]
