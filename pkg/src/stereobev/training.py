"""Training, evaluation, and prediction drivers shared by the CLI and the
test suites.

All randomness in a run flows from one seed, split per purpose (weight init,
data order, scene generation) through numpy SeedSequence spawn keys, so runs
are reproducible end to end.
"""

from __future__ import annotations

import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import io as dio
from . import metrics as mt
from . import scenesim as sim
from .autodiff import Tensor
from .errors import DataError, NumericError
from .network import ModelConfig, SbevModel, pseudo_lidar_bev, save_checkpoint
from .scenesim import SemanticMap

__all__ = ["RunConfig", "TrainResult", "train", "evaluate", "predict_probs",
           "EvalResult", "seed_for", "model_config_from", "front_class_map",
           "pseudo_lidar_planes_for"]

SEED_INIT, SEED_ORDER, SEED_PROBE = 1, 2, 3


def seed_for(seed: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(purpose,)))


@dataclass
class RunConfig:
    """Resolved settings of one CLI run. The defaults are the acceptance
    benchmark: they generate the 400/100 synthetic dataset and train the full
    variant on it within the desk-scale CPU budget."""
    seed: int = 0
    out: str = "runs/run"
    data: str = "data/toy"
    force: bool = False
    # dataset generation
    n_train: int = 400
    n_test: int = 100
    image_w: int = 128
    image_h: int = 96
    focal: float = 120.0
    baseline: float = 0.54
    cam_height: float = 1.5
    bev_x_half: float = 12.0
    bev_y_min: float = 4.0
    bev_y_max: float = 28.0
    grid_nx: int = 48
    grid_ny: int = 48
    # training
    variant: str = "full"
    epochs: int = 16
    batch_size: int = 2
    lr: float = 1e-3
    train_fraction: float = 1.0
    snapshot_every: int = 0
    # evaluation
    checkpoint: str = ""
    checkpoints: list = field(default_factory=list)
    thresholds: list = field(default_factory=lambda: [5.0, 10.0, 15.0, 20.0])
    with_pixel_ap: bool = False
    n_predict: int = 8
    # fraction sweep
    fractions: list = field(default_factory=lambda: [0.1, 0.25, 0.5, 1.0])
    # disparity probe
    probe_epochs: int = 3
    probe_train_samples: int = 60
    # model
    channels: int = 16
    feat_downsample: int = 4
    planes: int = 20
    max_disparity: float = 20.0
    volume_channels: int = 8
    reduced_channels: int = 32
    distill_channels: int = 8
    unet_width: int = 16
    unet_depth: int = 3

    def to_json(self) -> str:
        import json
        return json.dumps(asdict(self), indent=1)


def scene_geometry_from(cfg: RunConfig):
    """Rig, ground plane, and layout for dataset generation."""
    from .geometry import GroundPlane, LayoutSpec, StereoRig
    rig = StereoRig(f=cfg.focal, c_x=cfg.image_w / 2, c_y=cfg.image_h / 2,
                    t_x=cfg.baseline, image_w=cfg.image_w, image_h=cfg.image_h)
    plane = GroundPlane(a=0.0, b=0.0, c=cfg.cam_height)
    layout = LayoutSpec(x_min=-cfg.bev_x_half, x_max=cfg.bev_x_half,
                        y_min=cfg.bev_y_min, y_max=cfg.bev_y_max,
                        n_x=cfg.grid_nx, n_y=cfg.grid_ny, n_classes=5)
    return rig, plane, layout


def model_config_from(cfg: RunConfig, n_classes: int) -> ModelConfig:
    return ModelConfig(
        channels=cfg.channels, feat_downsample=cfg.feat_downsample,
        planes=cfg.planes, max_disparity=cfg.max_disparity,
        volume_channels=cfg.volume_channels, reduced_channels=cfg.reduced_channels,
        distill_channels=cfg.distill_channels, unet_width=cfg.unet_width,
        unet_depth=cfg.unet_depth, variant=cfg.variant, n_classes=n_classes)


def write_run_config(cfg: RunConfig, out_dir: str, command: str) -> None:
    import json
    doc = {"command": command, **asdict(cfg)}
    dio.atomic_write_text(os.path.join(out_dir, "config.json"), json.dumps(doc, indent=1))


# ---------------------------------------------------------------------------
# per-variant plumbing

def front_class_map(sample: dio.Sample, rig, plane) -> np.ndarray:
    """Re-render the reference view's per-pixel class ids from the scene spec
    (the sample files do not store them; the scene JSON is authoritative)."""
    with open(sample.scene_path, "r", encoding="utf-8") as f:
        scene = sim.SceneSpec.from_json(f.read())
    return sim.render_view(scene, rig, plane, cam_x=0.0).classes


def pseudo_lidar_planes_for(samples, model: SbevModel) -> dict:
    """Back-projected per-class BEV input planes, keyed by sample id. These
    are constants (ground-truth depth and front semantics), so they are
    computed once per run."""
    out = {}
    for s in samples:
        classes = front_class_map(s, model.rig, model.plane)
        out[s.id] = pseudo_lidar_bev(s.depth, classes, model.rig, model.layout)
    return out


def sample_loss(model: SbevModel, sample: dio.Sample, pl_planes: dict | None) -> Tensor:
    gt = SemanticMap(sample.gt, sample.visibility)
    v = model.variant
    if v == "cmd":
        logits_stereo, logits_ipm, l_kt = model.forward_cmd_training(sample.left, sample.right)
        return mt.loss_cmd(logits_ipm, logits_stereo, gt, l_kt)
    if v == "pseudo_lidar":
        logits = model.forward_pseudo_lidar(pl_planes[sample.id])
    elif v == "ipm_only":
        logits = model.forward_ipm_only(sample.left)
    else:
        logits = model.forward(sample.left, sample.right)
    return mt.loss_supervised(logits, gt)


def predict_probs(model: SbevModel, sample: dio.Sample,
                  pl_planes: dict | None = None) -> np.ndarray:
    """Inference class probabilities (n_classes, N_y, N_x)."""
    with ad.no_grad():
        v = model.variant
        if v == "pseudo_lidar":
            planes = (pl_planes or pseudo_lidar_planes_for([sample], model))[sample.id]
            logits = model.forward_pseudo_lidar(planes)
        elif v == "ipm_only":
            logits = model.forward_ipm_only(sample.left)
        else:
            logits = model.forward(sample.left, sample.right)
        return ad.softmax(logits, axis=0).data


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class EvalResult:
    report: mt.EvalReport
    per_class_ap: list | None = None
    member_mious: list = field(default_factory=list)


def evaluate(model: SbevModel, samples, thresholds=None, with_ap: bool = False,
             pl_planes: dict | None = None) -> EvalResult:
    """Dataset-level masked macro-IoU (global counts), optional distance bins
    at each threshold in both min and max modes, optional pixel AP."""
    layout = model.layout
    if model.variant == "pseudo_lidar" and pl_planes is None:
        pl_planes = pseudo_lidar_planes_for(samples, model)
    acc = mt.IouAccumulator(layout.n_classes)
    bin_accs = {}
    for t in thresholds or []:
        for mode in ("min", "max"):
            bin_accs[(t, mode)] = mt.IouAccumulator(layout.n_classes)
    ap_scores, ap_gt, ap_mask = [], [], []
    for s in samples:
        probs = predict_probs(model, s, pl_planes)
        pred = probs.argmax(axis=0)
        acc.update(pred, s.gt, s.visibility)
        for (t, mode), ba in bin_accs.items():
            ba.update(pred, s.gt, mt.distance_bin_mask(s.visibility, layout, t, mode))
        if with_ap:
            ap_scores.append(probs.reshape(layout.n_classes, -1))
            ap_gt.append(s.gt.reshape(-1))
            ap_mask.append(s.visibility.reshape(-1))
    report = acc.report()
    report.distance_bins = [(t, mode, ba.report().miou)
                            for (t, mode), ba in bin_accs.items()]
    ap = None
    if with_ap:
        ap = mt.pixel_ap(np.concatenate(ap_scores, axis=1)[:, None, :],
                         np.concatenate(ap_gt)[None], np.concatenate(ap_mask)[None])
    return EvalResult(report=report, per_class_ap=ap)


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainResult:
    checkpoint: str
    epoch_losses: list
    epoch_mious: list
    final_miou: float


def _lr_at(base: float, epoch: int, total: int) -> float:
    """Step decay: halve at one half and three quarters of the run. Only the
    initial rate is externally specified; the late halvings settle the
    epoch-average loss into a monotone tail."""
    b1 = max(1, int(np.ceil(total / 2)))
    b2 = max(2, int(np.ceil(3 * total / 4)))
    return base * (0.5 ** int(epoch >= b1)) * (0.5 ** int(epoch >= b2))


def train(cfg: RunConfig, log_fn=print) -> TrainResult:
    """Train cfg.variant on the dataset under cfg.data, logging per-epoch
    train loss and test mIoU to <out>/train_log.csv, checkpointing each epoch
    to <out>/model.sbvk (so a NaN abort retains the last good epoch)."""
    train_man = dio.read_manifest(os.path.join(cfg.data, "train.json"))
    test_man = dio.read_manifest(os.path.join(cfg.data, "test.json"))
    samples = dio.load_samples(train_man, fraction=cfg.train_fraction)
    test_samples = dio.load_samples(test_man)
    if not samples:
        raise DataError(f"no training samples under {cfg.data}")

    model = SbevModel(model_config_from(cfg, train_man.layout.n_classes),
                      train_man.rig, train_man.plane, train_man.layout,
                      seed=int(seed_for(cfg.seed, SEED_INIT).integers(2 ** 31)))
    pl_planes = None
    if cfg.variant == "pseudo_lidar":
        pl_planes = pseudo_lidar_planes_for(samples + test_samples, model)

    os.makedirs(cfg.out, exist_ok=True)
    state = ad.AdamState(lr=cfg.lr)
    order_rng = seed_for(cfg.seed, SEED_ORDER)
    ckpt_path = os.path.join(cfg.out, "model.sbvk")
    log_rows = ["epoch,train_loss,test_miou,lr,seconds"]
    losses, mious = [], []

    for epoch in range(cfg.epochs):
        t0 = time.time()
        state.lr = _lr_at(cfg.lr, epoch, cfg.epochs)
        perm = order_rng.permutation(len(samples))
        ad.zero_grads(model.params)
        epoch_loss = 0.0
        pending = 0
        for idx in perm:
            ad.reset_graph()
            loss = ad.mul(sample_loss(model, samples[int(idx)], pl_planes),
                          1.0 / cfg.batch_size)
            val = loss.item() * cfg.batch_size
            if not np.isfinite(val):
                raise NumericError(
                    f"non-finite training loss at epoch {epoch}; last good checkpoint "
                    f"retained at {ckpt_path}")
            epoch_loss += val
            ad.backward(loss)
            pending += 1
            if pending == cfg.batch_size:
                ad.adam_step(model.params, state)
                ad.zero_grads(model.params)
                pending = 0
        if pending:
            ad.adam_step(model.params, state)
            ad.zero_grads(model.params)

        mean_loss = epoch_loss / len(samples)
        miou = evaluate(model, test_samples, pl_planes=pl_planes).report.miou
        losses.append(mean_loss)
        mious.append(miou)
        save_checkpoint(model, ckpt_path)
        if cfg.snapshot_every and (epoch + 1) % cfg.snapshot_every == 0:
            save_checkpoint(model, os.path.join(cfg.out, "snapshots",
                                                f"epoch_{epoch + 1:03d}.sbvk"))
        dt = time.time() - t0
        log_rows.append(f"{epoch},{mean_loss!r},{miou!r},{state.lr!r},{dt:.2f}")
        dio.atomic_write_text(os.path.join(cfg.out, "train_log.csv"),
                              "\n".join(log_rows) + "\n")
        if log_fn:
            log_fn(f"epoch {epoch:3d}  loss {mean_loss:.4f}  test mIoU {miou:.4f}  "
                   f"lr {state.lr:.2e}  {dt:.1f}s")

    return TrainResult(checkpoint=ckpt_path, epoch_losses=losses,
                       epoch_mious=mious, final_miou=mious[-1] if mious else float("nan"))
