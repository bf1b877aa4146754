"""On-disk server state, so that a run can be resumed where it stopped."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .federation import FederationSpec, ServerState
from .nn import AdamState, load_params, save_params

_ADAM_SCALARS = ("lr", "beta1", "beta2", "eps", "step")


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _adam_dict(a: AdamState) -> dict:
    return {k: getattr(a, k) for k in _ADAM_SCALARS}


def save_state(directory, state: ServerState, extra: dict | None = None) -> dict[str, Path]:
    """Write theta (and phi) checkpoints plus optimiser moments; returns the paths."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    extra = dict(extra or {}, round=state.round)
    paths = {"theta": d / "theta.ffmp"}
    save_params(paths["theta"], state.theta, extra)
    arrays = {"theta_m": state.adam_theta.m, "theta_v": state.adam_theta.v}
    meta = {"round": state.round, "adam_theta": _adam_dict(state.adam_theta)}
    if state.phi is not None:
        paths["phi"] = d / "phi.ffmp"
        save_params(paths["phi"], state.phi, extra)
        arrays.update(phi_m=state.adam_phi.m, phi_v=state.adam_phi.v)
        meta["adam_phi"] = _adam_dict(state.adam_phi)
    paths["optimizer"] = d / "optimizer.npz"
    with open(paths["optimizer"], "wb") as fh:
        np.savez(fh, meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
                 **arrays)
    return paths


def load_state(directory, spec: FederationSpec) -> ServerState:
    d = Path(directory)
    try:
        theta = load_params(d / "theta.ffmp", spec.field_arch())
        with np.load(d / "optimizer.npz") as z:
            meta = json.loads(z["meta"].tobytes().decode())
            arrays = {k: z[k].copy() for k in z.files if k != "meta"}
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"cannot load server state from {d}: {exc}") from exc
    state = ServerState(theta, AdamState(arrays["theta_m"], arrays["theta_v"], **meta["adam_theta"]),
                        round=int(meta["round"]))
    if spec.coupling == "global_ot":
        if "adam_phi" not in meta:
            raise CheckpointError(f"{d} holds no dual potential but the run uses global_ot")
        state.phi = load_params(d / "phi.ffmp", spec.potential_arch())
        state.adam_phi = AdamState(arrays["phi_m"], arrays["phi_v"], **meta["adam_phi"])
    return state
