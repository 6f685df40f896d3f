"""Graph interchange: a JSON document plus a raw little-endian float32 blob.

The document carries structure (nodes, edge specs, IO lists) and a weight
manifest of (name, dims, byte offset); the blob is the concatenation of all
weight tensors in manifest order. Round-trips are bit-exact on weights and
structurally exact on the graph.
"""

from __future__ import annotations

import dataclasses
import json
from typing import Any

import numpy as np

from .ir import (
    Graph, KIND_CLASSES, Node, OpKind, TensorSpec, WeightStore, kind_name,
)

FORMAT_NAME = "corelower-graph"
FORMAT_VERSION = 1


class SchemaViolation(Exception):
    """Malformed document or blob; `path` points into the document."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


def _kind_to_doc(kind: OpKind) -> dict[str, Any]:
    doc: dict[str, Any] = {"op": kind_name(kind)}
    for f in dataclasses.fields(kind):
        v = getattr(kind, f.name)
        doc[f.name] = list(v) if isinstance(v, tuple) else v
    return doc


def _kind_from_doc(doc: Any, path: str) -> OpKind:
    if not isinstance(doc, dict) or "op" not in doc:
        raise SchemaViolation(path, "node kind must be an object with an 'op' field")
    name = doc["op"]
    cls = KIND_CLASSES.get(name)
    if cls is None:
        raise SchemaViolation(f"{path}.op", f"unknown operator {name!r}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in doc:
            v = doc[f.name]
            kwargs[f.name] = tuple(v) if isinstance(v, list) else v
        elif f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
            raise SchemaViolation(f"{path}.{f.name}", f"missing field for {name!r}")
    try:
        return cls(**kwargs)
    except Exception as exc:
        raise SchemaViolation(path, f"bad {name!r} parameters: {exc}") from exc


def serialize(graph: Graph) -> tuple[str, bytes]:
    """Returns (json document, weight blob)."""
    manifest = []
    chunks = []
    offset = 0
    for name in sorted(graph.weights.names()):
        arr = graph.weights[name]
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "dims": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    doc = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "nodes": [
            {
                "id": n.id,
                "kind": _kind_to_doc(n.kind),
                "inputs": list(n.inputs),
                "outputs": list(n.outputs),
                "params": dict(n.params),
                "attrs": dict(n.attrs),
            }
            for n in graph.nodes
        ],
        "edges": {e: {"dims": list(s.dims), "roles": list(s.roles)}
                  for e, s in graph.edges.items()},
        "inputs": list(graph.graph_inputs),
        "outputs": list(graph.graph_outputs),
        "weights": manifest,
    }
    return json.dumps(doc, indent=1), b"".join(chunks)


def _require(doc: dict, key: str, typ, path: str):
    if key not in doc:
        raise SchemaViolation(f"{path}.{key}", "missing field")
    v = doc[key]
    if not isinstance(v, typ):
        raise SchemaViolation(f"{path}.{key}", f"expected {typ.__name__}")
    return v


def deserialize(document: str, blob: bytes) -> Graph:
    try:
        doc = json.loads(document)
    except json.JSONDecodeError as exc:
        raise SchemaViolation("$", f"not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise SchemaViolation("$", "document root must be an object")
    if doc.get("format") != FORMAT_NAME:
        raise SchemaViolation("$.format", f"expected {FORMAT_NAME!r}")
    if doc.get("version") != FORMAT_VERSION:
        raise SchemaViolation("$.version", f"unsupported version {doc.get('version')!r}")

    manifest = _require(doc, "weights", list, "$")
    store = WeightStore()
    for i, entry in enumerate(manifest):
        path = f"$.weights[{i}]"
        name = _require(entry, "name", str, path)
        dims = tuple(_require(entry, "dims", list, path))
        offset = _require(entry, "offset", int, path)
        count = int(np.prod(dims)) if dims else 1
        end = offset + 4 * count
        if offset < 0 or end > len(blob):
            raise SchemaViolation(f"{path}.offset",
                                  f"weight {name!r} spans [{offset}, {end}) but blob "
                                  f"has {len(blob)} bytes")
        arr = np.frombuffer(blob[offset:end], dtype="<f4").reshape(dims)
        try:
            store.add(name, arr.copy())
        except Exception as exc:
            raise SchemaViolation(path, str(exc)) from exc

    edges = {}
    for e, spec in _require(doc, "edges", dict, "$").items():
        path = f"$.edges[{e!r}]"
        dims = _require(spec, "dims", list, path)
        roles = _require(spec, "roles", list, path)
        try:
            edges[e] = TensorSpec(tuple(dims), tuple(roles))
        except Exception as exc:
            raise SchemaViolation(path, str(exc)) from exc

    nodes = []
    for i, nd in enumerate(_require(doc, "nodes", list, "$")):
        path = f"$.nodes[{i}]"
        if not isinstance(nd, dict):
            raise SchemaViolation(path, "node must be an object")
        node = Node(
            id=_require(nd, "id", str, path),
            kind=_kind_from_doc(nd.get("kind"), f"{path}.kind"),
            inputs=list(_require(nd, "inputs", list, path)),
            outputs=list(_require(nd, "outputs", list, path)),
            params=dict(nd.get("params", {})),
            attrs=dict(nd.get("attrs", {})),
        )
        for role, pname in node.params.items():
            if pname not in store:
                raise SchemaViolation(f"{path}.params.{role}",
                                      f"param tensor {pname!r} missing from manifest")
        nodes.append(node)

    return Graph(
        nodes=nodes,
        edges=edges,
        graph_inputs=list(_require(doc, "inputs", list, "$")),
        graph_outputs=list(_require(doc, "outputs", list, "$")),
        weights=store,
    )


def save_graph(graph: Graph, doc_path: str, blob_path: str | None = None) -> str:
    """Write g.json plus sidecar g.bin; returns the blob path."""
    if blob_path is None:
        blob_path = doc_path[:-5] + ".bin" if doc_path.endswith(".json") else doc_path + ".bin"
    doc, blob = serialize(graph)
    with open(doc_path, "w", encoding="utf-8") as f:
        f.write(doc)
    with open(blob_path, "wb") as f:
        f.write(blob)
    return blob_path


def load_graph(doc_path: str, blob_path: str | None = None) -> Graph:
    if blob_path is None:
        blob_path = doc_path[:-5] + ".bin" if doc_path.endswith(".json") else doc_path + ".bin"
    with open(doc_path, "r", encoding="utf-8") as f:
        doc = f.read()
    with open(blob_path, "rb") as f:
        blob = f.read()
    return deserialize(doc, blob)


def graphs_structurally_equal(a: Graph, b: Graph) -> bool:
    """Structure plus bit-identical weights."""
    if [n.id for n in a.nodes] != [n.id for n in b.nodes]:
        return False
    for na, nb in zip(a.nodes, b.nodes):
        if (na.kind != nb.kind or na.inputs != nb.inputs or na.outputs != nb.outputs
                or na.params != nb.params or na.attrs != nb.attrs):
            return False
    if a.edges != b.edges or a.graph_inputs != b.graph_inputs \
            or a.graph_outputs != b.graph_outputs:
        return False
    if sorted(a.weights.names()) != sorted(b.weights.names()):
        return False
    return all(np.array_equal(a.weights[n], b.weights[n], equal_nan=True)
               for n in a.weights.names())
