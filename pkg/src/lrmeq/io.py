"""Instance export/import: Matrix Market files plus a JSON manifest.

An instance directory holds one ``.mtx`` file per coefficient matrix,
right-hand-side factor, and preconditioner matrix, and a
``manifest.json`` with the term list, metadata and sha256 content hashes.
Matrices are written with 17 significant digits so that a round trip is
bit-exact for doubles.
"""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np
import scipy.io as sio
import scipy.sparse as sp

from .equations import LowRankRhs, MultitermOperator
from .problems import ProblemInstance, _canonical

_MM_PRECISION = 17


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_matrix(path, A):
    sio.mmwrite(path, A, precision=_MM_PRECISION)


def _read_matrix(path):
    A = sio.mmread(path)
    if sp.issparse(A):
        return _canonical(A.tocsr())
    return np.asarray(A, dtype=float)


def export_instance(inst: ProblemInstance, out_dir):
    """Write an instance directory; returns the manifest dict."""
    os.makedirs(out_dir, exist_ok=True)
    files = {}

    def save(name, A):
        fname = f"{name}.mtx"
        _write_matrix(os.path.join(out_dir, fname), A)
        files[name] = fname

    for i, (Ai, Bi) in enumerate(zip(inst.op.A, inst.op.B)):
        save(f"A{i}", Ai)
        save(f"B{i}", Bi)
    save("FL", inst.F.left)
    save("FR", inst.F.right)
    precond = {}
    for label, spec in (("p1", inst.p1), ("p2", inst.p2)):
        if spec is None:
            continue
        entry = {"kind": spec["kind"], "matrices": {}}
        for key, mat in spec.items():
            if key == "kind":
                continue
            if mat is None:
                entry["matrices"][key] = None
            else:
                save(f"{label}_{key}", mat)
                entry["matrices"][key] = f"{label}_{key}"
        precond[label] = entry
    manifest = {
        "format": "lrmeq-instance-v1",
        "ell": inst.op.ell,
        "m": inst.op.m,
        "n": inst.op.n,
        "meta": inst.meta,
        "files": files,
        "precond": precond,
        "sha256": {name: _sha256(os.path.join(out_dir, f)) for name, f in files.items()},
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def import_instance(in_dir) -> ProblemInstance:
    """Read back an instance directory written by ``export_instance``."""
    with open(os.path.join(in_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "lrmeq-instance-v1":
        raise ValueError("unrecognized instance manifest")
    files = manifest["files"]

    def load(name):
        return _read_matrix(os.path.join(in_dir, files[name]))

    ell = manifest["ell"]
    op = MultitermOperator([load(f"A{i}") for i in range(ell)],
                           [load(f"B{i}") for i in range(ell)])
    F = LowRankRhs(np.atleast_2d(load("FL")), np.atleast_2d(load("FR")))
    preconds = {}
    for label, entry in manifest.get("precond", {}).items():
        spec = {"kind": entry["kind"]}
        for key, name in entry["matrices"].items():
            spec[key] = None if name is None else load(name)
        preconds[label] = spec
    return ProblemInstance(
        op, F,
        p1=preconds.get("p1"), p2=preconds.get("p2"),
        meta=manifest.get("meta", {}),
    )
