"""Static-scene comparison of the streaming variants with the full-frame network."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import tensor_core as tc
from ..attention import ActionSpace, Policy
from .network import StreamModel
from .session import StreamSession


def mean_abs(a, b) -> float:
    return float(np.mean(np.abs(np.asarray(a, np.float64) - np.asarray(b, np.float64))))


@dataclass
class VariantTrace:
    name: str
    layer_dev: list = field(default_factory=list)  # per scan: list over layers
    final_dev: list = field(default_factory=list)  # per scan: restore memory vs features
    mask_agree: list = field(default_factory=list)  # per scan: pixel agreement of seg masks


@dataclass
class OracleReport:
    space: ActionSpace
    scans: int
    variants: dict

    def rows(self):
        """(variant, scan, layer, deviation) with layer 'final' and 'mask_agree' rows."""
        out = []
        for name, tr in self.variants.items():
            for s in range(len(tr.final_dev)):
                for li, d in enumerate(tr.layer_dev[s]):
                    out.append((name, s + 1, f"layer{li}", d))
                out.append((name, s + 1, "final", tr.final_dev[s]))
                out.append((name, s + 1, "mask_agree", tr.mask_agree[s]))
        return out

    def to_csv(self) -> str:
        lines = ["variant,scan,layer,value"]
        lines += [f"{v},{s},{l},{d:.9f}" for v, s, l, d in self.rows()]
        return "\n".join(lines) + "\n"


def _trace(model, scene, name, mode, scans, ref_hidden, ref_final, ref_mask, context=True):
    sess = StreamSession(model, Policy("scanning"), task="seg", mode=mode, context=context)
    tr = VariantTrace(name)
    for _ in range(scans):
        for _ in range(model.space.num_actions):
            sess.step(scene)
        tr.layer_dev.append([mean_abs(c.memory, h) for c, h in zip(sess.cells, ref_hidden)])
        tr.final_dev.append(mean_abs(sess.restore.memory, ref_final))
        tr.mask_agree.append(float(np.mean(sess.mask_memory == ref_mask)))
    return tr


def oracle_check(model: StreamModel, scene, space: ActionSpace | None = None, scans: int | None = None) -> OracleReport:
    """Run the stateless network, the input-cell variant and the incremental-cells
    variant on one static frame under the scanning policy."""
    if space is not None:
        model = model.with_space(space)
    scans = scans or len(model.layers) + 2
    scene = tc.tensor(scene)
    res = model.forward_full(scene[None], tasks=("seg",))
    ref_hidden = [c[2][0] for c in res["caches"]]
    ref_final = res["outs"][-1][0]
    ref_mask = res["seg"][0, ..., 0] > 0
    variants = {
        "input-cell": _trace(model, scene, "input-cell", "input-cell", scans, ref_hidden, ref_final, ref_mask),
        "incremental": _trace(model, scene, "incremental", "incremental", scans, ref_hidden, ref_final, ref_mask),
    }
    return OracleReport(model.space, scans, variants)
