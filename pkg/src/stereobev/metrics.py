"""Training objectives and every reported evaluation quantity: the
visibility-masked cross entropy, the distillation composite loss, masked
macro-IoU with global count accumulation, distance-binned IoU, pixel-level
average precision, the 3-pixel disparity error, the frozen-trunk disparity
probe, and ensemble averaging.

Macro-IoU averages only over classes whose union is nonempty in the
evaluation set; IoU counts accumulate globally across samples before the
division (micro over samples, macro over classes).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DataError
from .geometry import LayoutSpec

__all__ = [
    "EvalReport", "IouAccumulator",
    "loss_supervised", "loss_cmd",
    "masked_macro_iou", "distance_binned_iou", "distance_bin_mask",
    "pixel_ap", "three_pixel_error", "ensemble_average",
    "disparity_probe", "ProbeResult",
    "report_to_csv", "report_to_json",
]


# ---------------------------------------------------------------------------
# losses

def loss_supervised(logits: Tensor, gt) -> Tensor:
    """Visibility-masked cross entropy against a SemanticMap-like object
    with .classes and .mask arrays."""
    return ad.masked_softmax_ce(logits, gt.classes, gt.mask)


def loss_cmd(logits_ipm: Tensor, logits_stereo: Tensor, gt, l_kt: Tensor) -> Tensor:
    """Distillation training objective: both heads supervised plus the
    first-K-channels tie, all with unit weights."""
    return ad.add(ad.add(loss_supervised(logits_ipm, gt),
                         loss_supervised(logits_stereo, gt)), l_kt)


# ---------------------------------------------------------------------------
# IoU

@dataclass
class EvalReport:
    per_class_iou: list          # NaN where the class union is empty
    miou: float                  # mean over defined classes, NaN if none
    n_visible: int
    distance_bins: list = field(default_factory=list)  # (threshold, mode, miou)

    def defined(self) -> list:
        return [v for v in self.per_class_iou if not np.isnan(v)]


@dataclass
class IouAccumulator:
    """Global per-class intersection/union counts over many samples."""
    n_classes: int
    inter: np.ndarray = None
    union: np.ndarray = None
    n_visible: int = 0

    def __post_init__(self):
        self.inter = np.zeros(self.n_classes, dtype=np.int64)
        self.union = np.zeros(self.n_classes, dtype=np.int64)

    def update(self, pred: np.ndarray, gt_classes: np.ndarray, mask: np.ndarray) -> None:
        if pred.shape != gt_classes.shape or mask.shape != pred.shape:
            raise ValueError(
                f"IoU update: shapes disagree, pred {pred.shape}, gt {gt_classes.shape}, "
                f"mask {mask.shape}")
        m = mask.astype(bool)
        self.n_visible += int(m.sum())
        p = pred[m]
        g = gt_classes[m]
        for c in range(self.n_classes):
            pc = p == c
            gc = g == c
            self.inter[c] += int((pc & gc).sum())
            self.union[c] += int((pc | gc).sum())

    def report(self) -> EvalReport:
        iou = np.where(self.union > 0, self.inter / np.maximum(self.union, 1), np.nan)
        defined = iou[~np.isnan(iou)]
        return EvalReport(per_class_iou=list(iou),
                          miou=float(defined.mean()) if defined.size else float("nan"),
                          n_visible=self.n_visible)


def masked_macro_iou(pred: np.ndarray, gt, n_classes: int) -> EvalReport:
    """Single-sample convenience wrapper; gt carries .classes and .mask."""
    acc = IouAccumulator(n_classes)
    acc.update(pred, gt.classes, gt.mask)
    return acc.report()


def distance_bin_mask(mask: np.ndarray, layout: LayoutSpec, threshold: float,
                      mode: str) -> np.ndarray:
    """Restrict a visibility mask to cells at least (mode='min') or at most
    (mode='max') `threshold` meters from the BEV origin."""
    if mode not in ("min", "max"):
        raise ValueError(f"distance_bin_mask: mode must be 'min' or 'max', got {mode!r}")
    bx, by = layout.center_mesh()
    dist = np.hypot(bx, by)
    keep = dist >= threshold if mode == "min" else dist < threshold
    return (mask.astype(bool) & keep).astype(np.uint8)


def distance_binned_iou(pred: np.ndarray, gt, layout: LayoutSpec,
                        thresholds, mode: str) -> list:
    """Per-threshold EvalReports for one sample's prediction."""
    if list(thresholds) != sorted(thresholds):
        raise ValueError("distance_binned_iou: thresholds must be ascending")
    out = []
    for t in thresholds:
        acc = IouAccumulator(layout.n_classes)
        acc.update(pred, gt.classes, distance_bin_mask(gt.mask, layout, t, mode))
        out.append(acc.report())
    return out


# ---------------------------------------------------------------------------
# pixel AP

def pixel_ap(scores: np.ndarray, gt_classes: np.ndarray, mask: np.ndarray) -> list:
    """Per-class average precision over visible pixels.

    scores: (n_classes, H, W) in [0, 1]. AP is the step integral of the
    precision-recall curve swept over the unique scores; classes with no
    visible positive pixel get NaN.
    """
    if scores.min() < 0 or scores.max() > 1:
        raise ValueError("pixel_ap: scores must lie in [0, 1]")
    n_classes = scores.shape[0]
    m = mask.astype(bool)
    out = []
    for c in range(n_classes):
        s = scores[c][m]
        pos = (gt_classes[m] == c)
        n_pos = int(pos.sum())
        if n_pos == 0:
            out.append(float("nan"))
            continue
        order = np.argsort(-s, kind="stable")
        s_sorted = s[order]
        tp = np.cumsum(pos[order])
        fp = np.cumsum(~pos[order])
        # collapse ties: PR points only where the threshold actually drops
        last = np.nonzero(np.diff(s_sorted, append=-np.inf))[0]
        precision = tp[last] / (tp[last] + fp[last])
        recall = tp[last] / n_pos
        prev_r = np.concatenate([[0.0], recall[:-1]])
        out.append(float(((recall - prev_r) * precision).sum()))
    return out


def three_pixel_error(pred_disp: np.ndarray, gt_disp: np.ndarray,
                      valid: np.ndarray) -> float:
    """Fraction of valid pixels with |pred - gt| > 3 px."""
    v = valid.astype(bool)
    if not v.any():
        raise ValueError("three_pixel_error: empty validity mask")
    return float((np.abs(pred_disp[v] - gt_disp[v]) > 3.0).mean())


def ensemble_average(prob_maps) -> np.ndarray:
    """Arithmetic mean of per-model class probability maps."""
    maps = [np.asarray(p) for p in prob_maps]
    if not maps:
        raise ValueError("ensemble_average: need at least one member")
    shape = maps[0].shape
    for i, p in enumerate(maps):
        if p.shape != shape:
            raise ValueError(f"ensemble_average: member {i} has shape {p.shape}, "
                             f"expected {shape}")
    return np.mean(maps, axis=0)


# ---------------------------------------------------------------------------
# disparity probe

@dataclass
class ProbeResult:
    error: float            # 3-pixel error of the probe on held-out scenes
    baseline_error: float   # best-constant-disparity 3-pixel error
    losses: list            # probe training loss per epoch


def _probe_targets(depth: np.ndarray, rig, cfg):
    """Ground-truth disparity at feature resolution plus its validity mask."""
    ds = cfg.feat_downsample
    d_sub = depth[ds // 2::ds, ds // 2::ds]
    with np.errstate(divide="ignore"):
        disp = np.where(d_sub > 0, rig.f * rig.t_x / np.maximum(d_sub, 1e-9), 0.0)
    valid = np.isfinite(d_sub) & (d_sub > 0) & (disp <= (cfg.planes - 1) * cfg.disp_step)
    return disp, valid


def disparity_probe(model, train_samples, test_samples, epochs: int = 3,
                    lr: float = 2e-3, seed: int = 0) -> ProbeResult:
    """Freeze the trunk, regress disparity from the refined feature volume
    with a single 3D conv plus soft-argmax over planes, and report the
    3-pixel error on the held-out samples.

    The trunk is evaluated once per sample and cached, so probe epochs only
    pay for the probe layer itself.
    """
    cfg = model.config
    rig = model.rig
    rng = np.random.default_rng(seed)

    was_grad = {k: p.requires_grad for k, p in model.params.items()}
    for p in model.params.values():
        p.requires_grad = False

    def trunk(sample):
        with ad.no_grad():
            fr = model.extract_features(Tensor(sample.left[None]))
            ft = model.extract_features(Tensor(sample.right[None]))
            return model.refine_volume(model.build_feature_volume(fr, ft)).data

    try:
        cached = []
        for s in train_samples:
            disp, valid = _probe_targets(s.depth, rig, cfg)
            if valid.any():
                cached.append((trunk(s), disp, valid))

        k = 3
        weight = ad.he_uniform(rng, (1, cfg.volume_channels, k, k, k),
                               cfg.volume_channels * k ** 3, "probe.weight")
        bias = Tensor(np.zeros(1), requires_grad=True, name="probe.bias")
        params = {"probe.weight": weight, "probe.bias": bias}
        state = ad.AdamState(lr=lr)
        plane_disp = Tensor((np.arange(cfg.planes) * cfg.disp_step)[:, None, None])

        def predict(vol_data):
            cost = ad.conv3d(Tensor(vol_data), weight, bias, stride=1, pad=k // 2)
            cost = ad.reshape(cost, vol_data.shape[2:])  # (D, H', W')
            p = ad.softmax(cost, axis=0)
            return ad.tsum(ad.mul(p, plane_disp), axis=0)  # soft-argmax disparity

        losses = []
        for _ in range(epochs):
            total = 0.0
            for vol, disp, valid in cached:
                ad.reset_graph()
                pred = predict(vol)
                diff = ad.absval(ad.sub(pred, Tensor(disp)))
                loss = ad.mul(ad.tsum(ad.mul(diff, Tensor(valid.astype(float)))),
                              1.0 / max(1, int(valid.sum())))
                total += loss.item()
                ad.zero_grads(params)
                ad.backward(loss)
                ad.adam_step(params, state)
            losses.append(total / max(1, len(cached)))

        # held-out evaluation, probe vs the best constant disparity from train
        train_disps = np.concatenate([d[v] for _, d, v in cached])
        const = float(np.median(train_disps))
        errs, base_errs = [], []
        for s in test_samples:
            disp, valid = _probe_targets(s.depth, rig, cfg)
            if not valid.any():
                continue
            with ad.no_grad():
                pred = predict(trunk(s)).data
            errs.append(three_pixel_error(pred, disp, valid))
            base_errs.append(three_pixel_error(np.full_like(disp, const), disp, valid))
        if not errs:
            raise DataError("disparity_probe: no test sample has valid disparity targets")
        return ProbeResult(error=float(np.mean(errs)),
                           baseline_error=float(np.mean(base_errs)), losses=losses)
    finally:
        for kname, p in model.params.items():
            p.requires_grad = was_grad[kname]


# ---------------------------------------------------------------------------
# report serialization

def report_to_json(report: EvalReport, class_names) -> str:
    doc = {
        "per_class_iou": {n: (None if np.isnan(v) else v)
                          for n, v in zip(class_names, report.per_class_iou)},
        "miou": None if np.isnan(report.miou) else report.miou,
        "n_visible": report.n_visible,
        "distance_bins": [{"threshold": t, "mode": m,
                           "miou": None if np.isnan(v) else v}
                          for t, m, v in report.distance_bins],
    }
    return json.dumps(doc, indent=1)


def report_to_csv(path: str, report: EvalReport, class_names) -> None:
    from .io import atomic_write_text
    import io as _io
    buf = _io.StringIO()
    w = csv.writer(buf)
    w.writerow(["class", "iou"])
    for n, v in zip(class_names, report.per_class_iou):
        w.writerow([n, "" if np.isnan(v) else f"{v:.6f}"])
    w.writerow(["miou", "" if np.isnan(report.miou) else f"{report.miou:.6f}"])
    w.writerow(["n_visible", report.n_visible])
    for t, m, v in report.distance_bins:
        w.writerow([f"miou_{m}_{t}m", "" if np.isnan(v) else f"{v:.6f}"])
    atomic_write_text(path, buf.getvalue())
