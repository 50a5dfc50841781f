"""Single-file model container.

Layout::

    magic        8 bytes   b"SUPRCTNR"
    header_len   uint64 LE length of the manifest
    header_crc   uint32 LE crc32 of the manifest bytes
    reserved     uint32    zero
    manifest     canonical UTF-8 JSON (sorted keys, no whitespace)
    padding      zeros up to the next multiple of 64
    tensors      raw little-endian row-major arrays, each starting on a
                 64-byte boundary relative to the start of the data section

The manifest holds ``format_version``, a ``metadata`` object (dimensions, tree,
part and foot-network descriptions) and a ``tensors`` directory mapping each
name to ``dtype``, ``shape``, ``offset``, ``length`` and ``crc32``. Floats are
stored as ``<f4`` when every value is exactly representable in single precision
and as ``<f8`` otherwise, so loading reproduces the saved model bit for bit.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from ..blendshapes import LinearShapeSpace, PoseBlock, SparsePoseBlendshapes
from ..errors import ChecksumError, FormatVersionError, ManifestError, TruncatedContainerError
from ..foot import FootDeformNet
from ..kinematics import KinematicTree
from ..model import ModelContainer
from ..parts import PartSpec

MAGIC = b"SUPRCTNR"
FORMAT_VERSION = 1
ALIGNMENT = 64
_PREAMBLE = struct.Struct("<8sQII")
_DTYPES = ("<f4", "<f8", "<i4")


def _align(n: int) -> int:
    return -(-n // ALIGNMENT) * ALIGNMENT


def _float_array(a) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    single = a.astype("<f4")
    if np.array_equal(single.astype(np.float64), a) and not np.any(np.signbit(single) != np.signbit(a)):
        return single
    return a.astype("<f8")


def _int_array(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.int64)
    if a.size and (a.min() < -(2**31) or a.max() >= 2**31):
        raise ManifestError("integer tensor out of int32 range")
    return np.ascontiguousarray(a, dtype="<i4")


def _csr_records(prefix: str, m: sp.csr_matrix, out: dict) -> None:
    m = sp.csr_matrix(m)
    m.sort_indices()
    out[f"{prefix}/indptr"] = _int_array(m.indptr)
    out[f"{prefix}/indices"] = _int_array(m.indices)
    out[f"{prefix}/data"] = _float_array(m.data)


def container_records(model: ModelContainer) -> tuple[dict, dict[str, np.ndarray]]:
    """Metadata and named arrays describing ``model``, exactly as they are stored."""
    arrays: dict[str, np.ndarray] = {}
    arrays["template"] = _float_array(model.template)
    arrays["faces"] = _int_array(model.faces)
    arrays["part_labels"] = _int_array(model.part_labels)
    _csr_records("skinning", model.skinning_weights, arrays)
    _csr_records("regressor", model.joint_regressor, arrays)
    for name, space in (("shape", model.shape_space), ("expression", model.expression_space)):
        arrays[f"{name}/basis"] = _float_array(space.basis)
        arrays[f"{name}/mean"] = _float_array(space.mean_offset)
    for j, b in model.pose_blendshapes.blocks.items():
        arrays[f"pose/{j}/vertices"] = _int_array(b.vertices)
        arrays[f"pose/{j}/weights"] = _float_array(b.weights)
        arrays[f"pose/{j}/coeffs"] = _float_array(b.coeffs)
    parts = {}
    for name, spec in model.part_specs.items():
        arrays[f"part/{name}/vertices"] = _int_array(spec.vertex_indices)
        if spec.local_shape_basis is not None:
            arrays[f"part/{name}/shape_basis"] = _float_array(spec.local_shape_basis)
        if spec.local_joint_regressor is not None:
            arrays[f"part/{name}/regressor"] = _float_array(spec.local_joint_regressor)
        if spec.regressor_joints is not None:
            arrays[f"part/{name}/regressor_joints"] = _int_array(spec.regressor_joints)
        parts[name] = {
            "shape_basis": spec.local_shape_basis is not None,
            "regressor": spec.local_joint_regressor is not None,
            "regressor_joints": spec.regressor_joints is not None,
        }
    feet = {}
    for side, net in model.foot_nets.items():
        for i, (w, b) in enumerate(zip(net.weights, net.biases)):
            arrays[f"foot/{side}/weight{i}"] = _float_array(w)
            arrays[f"foot/{side}/bias{i}"] = _float_array(b)
        arrays[f"foot/{side}/vertices"] = _int_array(net.foot_vertex_indices)
        arrays[f"foot/{side}/joints"] = _int_array(net.foot_joint_indices)
        arrays[f"foot/{side}/shape_basis"] = _float_array(net.shape_basis)
        feet[side] = {
            "layers": len(net.weights),
            "encoder_layers": net.n_encoder_layers,
            "negative_slope": net.negative_slope,
            "input_width": net.input_width,
            "foot_vertices": net.n_foot_vertices,
            "shape_coeffs": net.n_shape_coeffs,
        }
    metadata = {
        "kind": model.kind,
        "n_vertices": model.n_vertices,
        "n_joints": model.n_joints,
        "n_shape": model.n_shape,
        "n_expression": model.n_expression,
        "parents": list(model.tree.parents),
        "joint_names": list(model.tree.joint_names),
        "neighbor_sets": [list(ne) for ne in model.tree.neighbor_sets],
        "label_names": list(model.label_names),
        "pose_blocks": list(model.pose_blendshapes.blocks),
        "parts": parts,
        "foot_nets": feet,
    }
    return metadata, arrays


def write_records(metadata: dict, arrays: dict[str, np.ndarray], version: int = FORMAT_VERSION) -> bytes:
    """Serialize arrays and metadata without any model validation."""
    directory = {}
    chunks = []
    offset = 0
    for name in sorted(arrays):
        a = arrays[name]
        if a.dtype.str not in _DTYPES:
            raise ManifestError(f"tensor {name!r} has unsupported dtype {a.dtype.str}")
        raw = np.ascontiguousarray(a).tobytes()
        directory[name] = {
            "dtype": a.dtype.str,
            "shape": list(a.shape),
            "offset": offset,
            "length": len(raw),
            "crc32": zlib.crc32(raw),
        }
        padded = _align(len(raw))
        chunks.append(raw + b"\0" * (padded - len(raw)))
        offset += padded
    manifest = {"format_version": version, "metadata": metadata, "tensors": directory}
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    head = _PREAMBLE.pack(MAGIC, len(header), zlib.crc32(header), 0) + header
    head += b"\0" * (_align(len(head)) - len(head))
    return head + b"".join(chunks)


def encode_container(model: ModelContainer) -> bytes:
    metadata, arrays = container_records(model)
    return write_records(metadata, arrays)


def save_container(model: ModelContainer, path) -> None:
    """Write ``model`` to ``path`` atomically (temporary file, then rename)."""
    data = encode_container(model)
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_records(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse and integrity-check a container, returning metadata and arrays."""
    if len(data) < _PREAMBLE.size:
        raise TruncatedContainerError(f"file holds {len(data)} bytes, shorter than the preamble")
    magic, header_len, header_crc, _ = _PREAMBLE.unpack_from(data)
    if magic != MAGIC:
        raise ManifestError("not a model container (bad magic)")
    header_end = _PREAMBLE.size + header_len
    if len(data) < header_end:
        raise TruncatedContainerError("file ends inside the manifest")
    header = data[_PREAMBLE.size : header_end]
    if zlib.crc32(header) != header_crc:
        raise ChecksumError("manifest checksum mismatch")
    try:
        manifest = json.loads(header.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(manifest, dict):
        raise ManifestError("manifest must be an object")
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatVersionError(f"container format version {version!r}, this reader supports {FORMAT_VERSION}")
    metadata = manifest.get("metadata")
    directory = manifest.get("tensors")
    if not isinstance(metadata, dict) or not isinstance(directory, dict):
        raise ManifestError("manifest lacks metadata or tensor directory")

    base = _align(header_end)
    entries = []
    for name, entry in directory.items():
        try:
            dtype = entry["dtype"]
            shape = tuple(int(s) for s in entry["shape"])
            offset, length, crc = int(entry["offset"]), int(entry["length"]), int(entry["crc32"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"tensor {name!r} has a malformed directory entry") from exc
        if dtype not in _DTYPES:
            raise ManifestError(f"tensor {name!r} has unsupported dtype {dtype!r}")
        if any(s < 0 for s in shape) or offset < 0 or offset % ALIGNMENT:
            raise ManifestError(f"tensor {name!r} has a negative or misaligned extent")
        if length != int(np.prod(shape, dtype=np.int64)) * np.dtype(dtype).itemsize:
            raise ManifestError(f"tensor {name!r}: length {length} does not match shape {shape}")
        entries.append((offset, offset + length, name, dtype, shape, crc))
    entries.sort()
    for a, b in zip(entries, entries[1:]):
        if b[0] < a[1]:
            raise ManifestError(f"tensors {a[2]!r} and {b[2]!r} overlap")
    # every tensor is padded to the alignment, so the file must reach the padded end
    end = base + _align(max((e[1] for e in entries), default=0))
    if len(data) < end:
        raise TruncatedContainerError(f"file holds {len(data)} bytes, the tensor directory needs {end}")

    arrays = {}
    for offset, stop, name, dtype, shape, crc in entries:
        raw = data[base + offset : base + stop]
        if zlib.crc32(raw) != crc:
            raise ChecksumError(f"tensor {name!r} checksum mismatch")
        arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(shape)
    return metadata, arrays


def _need(arrays: dict, name: str, ndim: int | None = None, shape: tuple | None = None) -> np.ndarray:
    if name not in arrays:
        raise ManifestError(f"missing tensor {name!r}")
    a = arrays[name]
    if ndim is not None and a.ndim != ndim:
        raise ManifestError(f"tensor {name!r} has {a.ndim} dimensions, expected {ndim}")
    if shape is not None and tuple(a.shape) != tuple(shape):
        raise ManifestError(f"tensor {name!r} has shape {a.shape}, expected {shape}")
    return a


def _csr(arrays, prefix, shape) -> sp.csr_matrix:
    indptr = _need(arrays, f"{prefix}/indptr", shape=(shape[0] + 1,)).astype(np.int64)
    indices = _need(arrays, f"{prefix}/indices", 1).astype(np.int64)
    values = _need(arrays, f"{prefix}/data", shape=indices.shape).astype(np.float64)
    if indptr[0] != 0 or indptr[-1] != indices.size or np.any(np.diff(indptr) < 0):
        raise ManifestError(f"{prefix} row pointers are inconsistent")
    if indices.size and (indices.min() < 0 or indices.max() >= shape[1]):
        raise ManifestError(f"{prefix} column index out of range")
    return sp.csr_matrix((values, indices, indptr), shape=shape)


def model_from_records(metadata: dict, arrays: dict[str, np.ndarray]) -> ModelContainer:
    """Rebuild and validate a model; invariant violations raise ``InvalidModelError``."""
    try:
        n = int(metadata["n_vertices"])
        k = int(metadata["n_joints"])
        s = int(metadata["n_shape"])
        e = int(metadata["n_expression"])
        kind = str(metadata["kind"])
        parents = [int(p) for p in metadata["parents"]]
        names = [str(x) for x in metadata["joint_names"]]
        neighbors = [[int(x) for x in ne] for ne in metadata["neighbor_sets"]]
        label_names = [str(x) for x in metadata["label_names"]]
        block_ids = [int(j) for j in metadata["pose_blocks"]]
        parts = dict(metadata["parts"])
        feet = dict(metadata["foot_nets"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"malformed metadata: {exc}") from exc
    if len(parents) != k:
        raise ManifestError(f"metadata lists {len(parents)} parents for {k} joints")

    f64 = lambda a: np.asarray(a, dtype=np.float64)  # noqa: E731
    template = f64(_need(arrays, "template", shape=(n, 3)))
    faces = _need(arrays, "faces", 2).astype(np.int64)
    labels = _need(arrays, "part_labels", shape=(n,)).astype(np.int64)
    skinning = _csr(arrays, "skinning", (n, k))
    regressor = _csr(arrays, "regressor", (k, n))
    spaces = {}
    for name, count in (("shape", s), ("expression", e)):
        basis = f64(_need(arrays, f"{name}/basis", shape=(n, 3, count)))
        mean = f64(_need(arrays, f"{name}/mean", shape=(n, 3)))
        spaces[name] = LinearShapeSpace(basis, mean)
    blocks = {}
    for j in block_ids:
        v = _need(arrays, f"pose/{j}/vertices", 1)
        blocks[j] = PoseBlock(
            v.astype(np.int64),
            f64(_need(arrays, f"pose/{j}/weights", shape=v.shape)),
            f64(_need(arrays, f"pose/{j}/coeffs", 3)),
        )
    specs = {}
    for name, flags in parts.items():
        specs[name] = PartSpec(
            name,
            _need(arrays, f"part/{name}/vertices", 1).astype(np.int64),
            f64(_need(arrays, f"part/{name}/shape_basis", 3)) if flags.get("shape_basis") else None,
            f64(_need(arrays, f"part/{name}/regressor", 2)) if flags.get("regressor") else None,
            _need(arrays, f"part/{name}/regressor_joints", 1).astype(np.int64)
            if flags.get("regressor_joints")
            else None,
        )
    nets = {}
    for side, info in feet.items():
        try:
            layers = int(info["layers"])
            declared = int(info["input_width"])
            encoder = int(info["encoder_layers"])
            slope = float(info["negative_slope"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"malformed foot network entry for {side!r}") from exc
        weights = [f64(_need(arrays, f"foot/{side}/weight{i}", 2)) for i in range(layers)]
        biases = [f64(_need(arrays, f"foot/{side}/bias{i}", 1)) for i in range(layers)]
        if layers and weights[0].shape[1] != declared:
            raise ManifestError(f"foot network {side!r} declares input width {declared}, weights take {weights[0].shape[1]}")
        nets[side] = FootDeformNet(
            weights,
            biases,
            encoder,
            _need(arrays, f"foot/{side}/vertices", 1).astype(np.int64),
            _need(arrays, f"foot/{side}/joints", 1).astype(np.int64),
            f64(_need(arrays, f"foot/{side}/shape_basis", 3)),
            n,
            slope,
        )
    return ModelContainer(
        template=template,
        faces=faces,
        skinning_weights=skinning,
        joint_regressor=regressor,
        shape_space=spaces["shape"],
        expression_space=spaces["expression"],
        pose_blendshapes=SparsePoseBlendshapes(n, blocks),
        tree=KinematicTree(tuple(parents), tuple(names), tuple(tuple(ne) for ne in neighbors)),
        part_labels=labels,
        label_names=tuple(label_names),
        part_specs=specs,
        foot_nets=nets,
        kind=kind,
    )


def decode_container(data: bytes) -> ModelContainer:
    metadata, arrays = read_records(bytes(data))
    return model_from_records(metadata, arrays)


def load_container(path) -> ModelContainer:
    """Read, integrity-check and validate a container file."""
    with open(path, "rb") as fh:
        data = fh.read()
    return decode_container(data)
