"""Joint affordance + occupancy training: losses, batching, the loop.

Loss structure: L = L_A + L_G with
  L_A = L_q + q * (L_r + L_w)   (rotation/width supervised on successes only)
  L_r = min(1 - |r_hat . r|, 1 - |r_hat . r_pi|)
  L_G = mean binary cross-entropy over the occupancy samples
where r_pi is the label rotated 180 degrees about the gripper approach
axis (finger swap leaves a parallel jaw grasp unchanged).

Each batch element is one scene: its TSDF, one grasp label drawn from the
scene's pool, and K occupancy samples.  Modes: "joint", "affordance-only",
"geometry-only", and "detached" (frozen encoder, fresh occupancy decoder,
geometry loss only).
"""

import csv
import dataclasses
import logging
import os
import time

import numpy as np

from . import autodiff as ad
from . import quat
from .autodiff import Tensor
from .network import GigaNet

logger = logging.getLogger(__name__)

MODES = ("joint", "affordance-only", "geometry-only", "detached")
BCE_EPS = 1e-7
# 180 degrees about the local approach (wrist) axis, applied on the right
_FLIP = np.array([0.0, 0.0, 0.0, 1.0])


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    mode: str = "joint"
    occ_per_element: int = 64

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.occ_per_element < 1:
            raise ValueError("occupancy samples per element must be >= 1")
        if self.mode not in MODES:
            raise ValueError("mode %r not in %r" % (self.mode, MODES))


@dataclasses.dataclass
class Batch:
    """One optimizer step worth of data (one grasp label per scene)."""

    tsdf: np.ndarray          # [B, N, N, N]
    grasp_points: np.ndarray  # [B, 1, 3] meters
    rot: np.ndarray           # [B, 4] unit quaternions
    width: np.ndarray         # [B, 1] meters
    quality: np.ndarray       # [B, 1] in {0, 1}
    occ_points: np.ndarray    # [B, K, 3] meters
    occ_labels: np.ndarray    # [B*K, 1] in {0, 1}


# ---------------------------------------------------------------------------
# Losses.  Predictions may be Tensors (training) or arrays (direct checks);
# labels are plain arrays.  All return scalar Tensors (mean over rows).


def _pred_rows(x, width):
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=np.float64).reshape(-1, width))
    if x.data.ndim != 2 or x.data.shape[1] != width:
        raise ad.ShapeError("prediction shape %r vs (N, %d)" % (x.shape, width))
    return x


def _label_rows(x, width):
    arr = np.asarray(x, dtype=np.float64).reshape(-1, width)
    return arr


def _unit_label(r):
    r = np.asarray(r, dtype=np.float64).reshape(-1, 4)
    norms = np.linalg.norm(r, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        logger.warning("non-unit label quaternion normalized")
        r = r / norms[:, None]
    return r


def _bce_rows(p, y):
    """Per-row binary cross-entropy, predictions clamped to [eps, 1-eps]."""
    p = ad.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    pos = ad.mul(ad.log(p), Tensor(y))
    q = ad.add_const(ad.scale(p, -1.0), 1.0)
    neg = ad.mul(ad.log(q), Tensor(1.0 - y))
    return ad.scale(ad.add(pos, neg), -1.0)


def _rotation_rows(r_hat, r):
    """Per-row symmetric quaternion distance, in [0, 1]."""
    r_hat = _pred_rows(r_hat, 4)
    norms = np.linalg.norm(r_hat.data, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        logger.warning("non-unit predicted quaternion normalized")
        r_hat = ad.normalize_rows(r_hat)
    r = _unit_label(r)
    r_pi = np.stack([quat.multiply(row, _FLIP) for row in r])
    losses = []
    for target in (r, r_pi):
        dot = ad.sum_axis(ad.mul(r_hat, Tensor(target)), axis=1)
        losses.append(ad.add_const(ad.scale(ad.abs_(dot), -1.0), 1.0))
    return ad.reshape(ad.minimum(losses[0], losses[1]), (r.shape[0], 1))


def rotation_loss(r_hat, r):
    """Mean over rows of min(1-|r_hat.r|, 1-|r_hat.r_pi|)."""
    return ad.mean_all(_rotation_rows(r_hat, r))


def affordance_loss(pred, label):
    """L_q + q*(L_r + L_w), averaged over rows.

    pred: (quality, rotation, width) predictions; label: (q, r, w) arrays.
    """
    loss, _ = affordance_terms(pred, label)
    return loss


def affordance_terms(pred, label):
    """Affordance loss plus logged components (means; L_r/L_w over q=1 rows)."""
    q_hat, r_hat, w_hat = pred
    q, r, w = label
    q_hat = _pred_rows(q_hat, 1)
    w_hat = _pred_rows(w_hat, 1)
    q = _label_rows(q, 1)
    w = _label_rows(w, 1)
    if not np.all(np.isin(q, (0.0, 1.0))):
        raise ValueError("grasp quality labels must be binary")

    l_q = _bce_rows(q_hat, q)
    l_r = _rotation_rows(r_hat, r)
    d = ad.sub(w_hat, Tensor(w))
    l_w = ad.mul(d, d)
    gated = ad.mul(ad.add(l_r, l_w), Tensor(q))
    loss = ad.mean_all(ad.add(l_q, gated))

    n_pos = max(float(q.sum()), 1.0)
    parts = {
        "L_q": float(l_q.data.mean()),
        "L_r": float((l_r.data * q).sum() / n_pos),
        "L_w": float((l_w.data * q).sum() / n_pos),
    }
    return loss, parts


def geometry_loss(o_hat, o):
    """Mean binary cross-entropy over occupancy samples."""
    o_hat = _pred_rows(o_hat, 1)
    o = _label_rows(o, 1)
    if not np.all(np.isin(o, (0.0, 1.0))):
        raise ValueError("occupancy labels must be binary")
    return ad.mean_all(_bce_rows(o_hat, o))


def total_loss(pred, label, o_hat, o, mode="joint"):
    """Mode-dependent sum; returns (scalar Tensor, logged components).

    Dropped terms may be passed as None.  "detached" optimizes the
    geometry term only; freezing the encoder is the loop's business.
    """
    if mode not in MODES:
        raise ValueError("mode %r not in %r" % (mode, MODES))
    parts = {"L_A": 0.0, "L_q": 0.0, "L_r": 0.0, "L_w": 0.0, "L_G": 0.0}
    terms = []
    if mode in ("joint", "affordance-only"):
        l_a, aff_parts = affordance_terms(pred, label)
        parts.update(aff_parts)
        parts["L_A"] = float(l_a.data)
        terms.append(l_a)
    if mode in ("joint", "geometry-only", "detached"):
        l_g = geometry_loss(o_hat, o)
        parts["L_G"] = float(l_g.data)
        terms.append(l_g)
    loss = terms[0] if len(terms) == 1 else ad.add(terms[0], terms[1])
    return loss, parts


# ---------------------------------------------------------------------------
# Batching and the loop


def _validate_records(records, config, net):
    if not records:
        raise ValueError("training dataset is empty")
    n = net.config.plane_resolution
    ws = net.config.workspace_size
    for rec in records:
        if rec.grid.values.shape != (n, n, n):
            raise ValueError("scene %d TSDF shape %r does not match the "
                             "network resolution %d"
                             % (rec.scene_id, rec.grid.values.shape, n))
        if not rec.labels:
            raise ValueError("scene %d has no grasp labels" % rec.scene_id)
        if len(rec.occ_points) < config.occ_per_element:
            raise ValueError("scene %d has %d occupancy samples, need >= %d"
                             % (rec.scene_id, len(rec.occ_points),
                                config.occ_per_element))
        centers = np.stack([lab.grasp.center for lab in rec.labels])
        if centers.min() < 0.0 or centers.max() > ws:
            raise ValueError("scene %d grasp centers leave the workspace"
                             % rec.scene_id)


def assemble_batch(records, config, rng):
    """Draw one grasp label and an occupancy subset per scene."""
    k = config.occ_per_element
    tsdf, gp, rot, width, quality, op, ol = [], [], [], [], [], [], []
    for rec in records:
        lab = rec.labels[int(rng.integers(len(rec.labels)))]
        idx = rng.choice(len(rec.occ_points), size=k, replace=False)
        tsdf.append(rec.grid.values)
        gp.append(lab.grasp.center[None])
        rot.append(lab.grasp.rotation)
        width.append([lab.grasp.width])
        quality.append([float(lab.q)])
        op.append(rec.occ_points[idx])
        ol.append(rec.occ_labels[idx])
    return Batch(tsdf=np.stack(tsdf), grasp_points=np.stack(gp),
                 rot=np.stack(rot), width=np.array(width),
                 quality=np.array(quality), occ_points=np.stack(op),
                 occ_labels=np.concatenate(ol).astype(float)[:, None])


def step_loss(net, batch, mode):
    """Forward pass for one batch under the given mode."""
    if mode == "affordance-only":
        planes = net.encode(batch.tsdf)
        feat = net.query_feature(planes, batch.grasp_points)
        pred = net.decode_affordance(feat, batch.grasp_points)
        return total_loss(pred, (batch.quality, batch.rot, batch.width),
                          None, None, mode)
    if mode in ("geometry-only", "detached"):
        planes = net.encode(batch.tsdf)
        feat = net.query_feature(planes, batch.occ_points)
        o_hat = net.decode_occupancy(feat, batch.occ_points)
        return total_loss(None, None, o_hat, batch.occ_labels, mode)
    pred, o_hat = net.forward_joint(batch.tsdf, batch.grasp_points,
                                    batch.occ_points)
    return total_loss(pred, (batch.quality, batch.rot, batch.width),
                      o_hat, batch.occ_labels, mode)


CSV_FIELDS = ("epoch", "L_A", "L_q", "L_r", "L_w", "L_G", "seconds")


def train_loop(records, config, net=None, out_dir=None):
    """Optimize over the dataset; returns (net, per-epoch metrics).

    Seeded shuffling and label/occupancy draws make runs with the same
    seed bit-identical.  When out_dir is given, writes metrics.csv plus
    one checkpoint per epoch and final.ckpt.
    """
    if config.mode == "detached":
        if net is None:
            raise ValueError("detached mode requires a pretrained network")
        net.set_encoder_trainable(False)
        net.reinit_decoder("occupancy", seed=config.seed)
    elif net is None:
        net = GigaNet(seed=config.seed)
    _validate_records(records, config, net)

    opt = ad.Adam(net.params, lr=config.lr)
    rng = np.random.default_rng(config.seed)
    writer = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        fh = open(os.path.join(out_dir, "metrics.csv"), "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()

    metrics = []
    try:
        for epoch in range(1, config.epochs + 1):
            t0 = time.perf_counter()
            order = rng.permutation(len(records))
            sums = dict.fromkeys(CSV_FIELDS[1:-1], 0.0)
            steps = 0
            for lo in range(0, len(order), config.batch_size):
                chunk = [records[i] for i in order[lo:lo + config.batch_size]]
                batch = assemble_batch(chunk, config, rng)
                tape = ad.Tape()
                with tape:
                    loss, parts = step_loss(net, batch, config.mode)
                tape.backward(loss)
                opt.step()
                for key, val in parts.items():
                    sums[key] += val
                steps += 1
            row = {key: val / steps for key, val in sums.items()}
            row["epoch"] = epoch
            row["seconds"] = time.perf_counter() - t0
            metrics.append(row)
            logger.info("epoch %d: L_A %.4f L_G %.4f (%.1fs)",
                        epoch, row["L_A"], row["L_G"], row["seconds"])
            if writer is not None:
                writer.writerow(row)
                fh.flush()
                net.save(os.path.join(out_dir, "epoch_%04d.ckpt" % epoch),
                         meta={"epoch": epoch, "mode": config.mode})
    finally:
        if writer is not None:
            fh.close()
    if out_dir is not None:
        net.save(os.path.join(out_dir, "final.ckpt"),
                 meta={"epoch": config.epochs, "mode": config.mode})
    return net, metrics
