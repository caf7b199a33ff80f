"""Alternating adversarial training plus continuous detector updates.

Phases flip every ``switch_period`` steps:

 - classifier phase: encoder/decoder frozen (eval mode, no grads). The
   classifier minimizes its BCE, the *negated* reconstruction errors (it moves
   its CAM so the frozen decoder fails to explain the image), and the
   center-consistency gap to the frozen encoder CAM.
 - encoder phase: classifier frozen. Encoder+decoder minimize BCE plus the
   cross-region reconstruction errors, masked by the encoder's own CAM; the
   feature split itself always uses the classifier CAM.

The detector trains every step regardless of phase, on CRF-refined pseudo
labels from the classifier CAM. Its input is the concatenation of the two
stride-8 feature maps, detached: detector gradients never reach the
adversarial pair, and frozen-side parameters and buffers are bit-stable
within the opposite phase.

Anything random is derived from (seed, step) or the saved torch RNG state, so
a resumed run continues the exact trajectory of an uninterrupted one.
"""

from __future__ import annotations

import json
import pickle
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import losses
from .attention import PathAttention, PlainFusion
from .center_consistency import consistency_loss
from .config import Config, config_from_dict, config_to_dict, dumps_toml, \
    loads_toml, save_resolved, validate_config
from .data import DatasetManifest, epoch_indices, load_batch
from .errors import CheckpointError, NumericalError
from .networks import ClassifierNet, Detector, RecDecoder, RecEncoder, \
    decompose_features, default_z_channels, normalize_cam
from .pseudo_label import binarize_and_select, refine_cam

CHECKPOINT_FORMAT_VERSION = 1


def lr_at(step: int, total_steps: int, base_lr: float, power: float) -> float:
    """Polynomial decay base_lr * (1 - step/total)^power, floored at 0."""
    if total_steps <= 0:
        return base_lr
    frac = min(max(step / total_steps, 0.0), 1.0)
    return base_lr * (1.0 - frac) ** power


def build_models(mcfg, acfg) -> dict:
    """Instantiate the networks selected by the model/attention config."""
    cls = ClassifierNet(mcfg.backbone, mcfg.width)
    models = {"cls": cls}
    fusion_in = cls.feature_channels
    if mcfg.use_reconstructor:
        rec_e = RecEncoder(mcfg.backbone, mcfg.width, mcfg.z_channels)
        rec_d = RecDecoder(rec_e.z_channels, rec_e.backbone.skip_channels)
        models["rec_e"], models["rec_d"] = rec_e, rec_d
        fusion_in += rec_e.z_channels
    out_ch = max(fusion_in // 2, 32)
    if mcfg.use_attention:
        models["fusion"] = PathAttention(fusion_in, out_ch,
                                         acfg.kernel_size, acfg.reduction)
    else:
        models["fusion"] = PlainFusion(fusion_in, out_ch)
    models["det"] = Detector(out_ch)
    return models


def _set_trainable(module: torch.nn.Module, flag: bool):
    module.train(flag)
    for p in module.parameters():
        p.requires_grad_(flag)


def _upsample_cam(cam: torch.Tensor, size: int) -> torch.Tensor:
    """(N,h,w) -> (N,1,S,S), bilinear with aligned corners (differentiable)."""
    return F.interpolate(cam.unsqueeze(1), size=(size, size),
                         mode="bilinear", align_corners=True)


class Trainer:
    def __init__(self, cfg: Config, manifest: DatasetManifest,
                 run_dir=None, device: str = None):
        validate_config(cfg)
        self.cfg = cfg
        self.manifest = manifest
        self.device = torch.device(device or cfg.train.device)
        torch.manual_seed(cfg.train.seed)

        self.models = build_models(cfg.model, cfg.attention)
        for m in self.models.values():
            m.to(self.device)

        t = cfg.train
        self.opts = {}
        self.opts["cls"] = torch.optim.SGD(self.models["cls"].parameters(),
                                           lr=t.base_lr, momentum=t.momentum,
                                           weight_decay=t.weight_decay)
        if "rec_e" in self.models:
            rec_params = list(self.models["rec_e"].parameters()) \
                + list(self.models["rec_d"].parameters())
            self.opts["rec"] = torch.optim.SGD(rec_params, lr=t.base_lr,
                                               momentum=t.momentum,
                                               weight_decay=t.weight_decay)
        det_params = list(self.models["fusion"].parameters()) \
            + list(self.models["det"].parameters())
        self.opts["det"] = torch.optim.SGD(det_params, lr=t.base_lr,
                                           momentum=t.momentum,
                                           weight_decay=t.weight_decay)

        n = len(manifest)
        self.batches_per_epoch = max(n // cfg.data.batch_size, 1)
        if t.max_steps > 0:
            self.total_steps = t.max_steps
        else:
            self.total_steps = t.epochs * self.batches_per_epoch
        self.step = 0
        self.lr_mult = 1.0
        self.best_loss = float("inf")
        self.best_step = -1

        self.run_dir = Path(run_dir) if run_dir else None
        self._log_fh = None
        if self.run_dir:
            (self.run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
            (self.run_dir / "exports").mkdir(exist_ok=True)
            save_resolved(cfg, self.run_dir / "config.resolved.toml")
            self._log_fh = open(self.run_dir / "train_log.jsonl", "a")

    # ------------------------------------------------------------------ phases

    def phase_at(self, step: int) -> str:
        if "rec_e" not in self.models:
            return "cls"
        return "cls" if (step // self.cfg.train.switch_period) % 2 == 0 else "rec"

    def _apply_phase_modes(self, phase: str):
        _set_trainable(self.models["cls"], phase == "cls")
        if "rec_e" in self.models:
            _set_trainable(self.models["rec_e"], phase == "rec")
            _set_trainable(self.models["rec_d"], phase == "rec")
        _set_trainable(self.models["fusion"], True)
        _set_trainable(self.models["det"], True)

    # ------------------------------------------------------------------ losses

    def _compute_losses(self, batch, phase: str) -> dict:
        cfg = self.cfg
        w = cfg.loss
        images = batch.images.to(self.device)
        raw = batch.images_raw.to(self.device)
        targets = batch.targets.to(self.device)
        crack = batch.labels.to(self.device) == 1
        size = cfg.data.input_size
        zero = torch.zeros((), device=self.device)

        out = {"phase": phase}
        rec_out = None
        if phase == "cls":
            cls_out = self.models["cls"](images)
            bce = losses.classification_bce(cls_out["logits"], targets)
            m_cls = normalize_cam(cls_out["cam_raw"])[:, 1]  # live
            l_crack = l_road = cec = zero
            if "rec_e" in self.models:
                with torch.no_grad():
                    rec_out = self.models["rec_e"](images)
                m_rec = normalize_cam(rec_out["cam_raw"])[:, 1]
                if bool(crack.any()):
                    z = rec_out["z"][crack]
                    z_c, z_r = decompose_features(z, m_cls[crack])
                    sk2, sk4 = rec_out["skip2"][crack], rec_out["skip4"][crack]
                    o_c = self.models["rec_d"](z_c, sk2, sk4)
                    o_r = self.models["rec_d"](z_r, sk2, sk4)
                    m_up = _upsample_cam(m_cls[crack], size)
                    target = raw[crack]
                    l_crack = losses.masked_l1(1.0 - m_up, target, o_c, sign=-1.0)
                    l_road = losses.masked_l1(m_up, target, o_r, sign=-1.0)
                    if cfg.model.use_center_consistency:
                        terms = []
                        for i in torch.nonzero(crack).flatten().tolist():
                            t = consistency_loss(m_cls[i], m_rec[i],
                                                 cfg.center.sigma,
                                                 cfg.center.detach_prior)
                            if t is not None:
                                terms.append(t)
                        if terms:
                            cec = torch.stack(terms).mean()
            total = losses.cls_total(bce, l_crack, l_road, cec, w)
            out.update(bce=bce, crack=l_crack, road=l_road,
                       consistency=cec, adv_total=total)
            out["cam_src"] = m_cls
            out["feat_cls"] = cls_out["feature"]
        else:  # encoder/decoder phase
            with torch.no_grad():
                cls_out = self.models["cls"](images)
                m_cls = normalize_cam(cls_out["cam_raw"])[:, 1]  # constant
            rec_out = self.models["rec_e"](images)
            bce = losses.classification_bce(rec_out["logits"], targets)
            m_rec = normalize_cam(rec_out["cam_raw"])[:, 1]  # live
            l_crack = l_road = zero
            if bool(crack.any()):
                z = rec_out["z"][crack]
                z_c, z_r = decompose_features(z, m_cls[crack])
                sk2, sk4 = rec_out["skip2"][crack], rec_out["skip4"][crack]
                o_c = self.models["rec_d"](z_c, sk2, sk4)
                o_r = self.models["rec_d"](z_r, sk2, sk4)
                m_up = _upsample_cam(m_rec[crack], size)
                target = raw[crack]
                l_crack = losses.masked_l1(1.0 - m_up, target, o_c)
                l_road = losses.masked_l1(m_up, target, o_r)
            total = losses.rec_total(bce, l_crack, l_road, w)
            out.update(bce=bce, crack=l_crack, road=l_road,
                       consistency=zero, adv_total=total)
            out["cam_src"] = m_cls
            out["feat_cls"] = cls_out["feature"]

        out["det"], out["n_pseudo"] = self._detector_loss(
            batch, raw, crack, out["feat_cls"], rec_out, out["cam_src"])
        out["total"] = out["adv_total"] + out["det"]
        return out

    def _detector_loss(self, batch, raw, crack, feat_cls, rec_out, cam_src):
        """BCE on CRF-refined pseudo labels; crack samples only, empty masks
        are filtered out. Inputs to the detector path are detached unless
        detector.backprop_into_backbones lets its gradient reach the live
        side of the adversarial pair."""
        cfg = self.cfg
        zero = torch.zeros((), device=self.device)
        if self.step < cfg.train.warmup_steps or not bool(crack.any()):
            return zero, 0
        feats = [feat_cls[crack]]
        if rec_out is not None:
            feats.append(rec_out["z"][crack])
        z_con = torch.cat(feats, dim=1)
        if not cfg.detector.backprop_into_backbones:
            z_con = z_con.detach()
        fused = self.models["fusion"](z_con)["features"]
        logits = self.models["det"](fused).squeeze(1)  # (Nc,S,S)

        cams = cam_src.detach()[crack].cpu().numpy()
        imgs = raw[crack].permute(0, 2, 3, 1).cpu().numpy()
        keep, masks = [], []
        for i in range(cams.shape[0]):
            marg = refine_cam(cams[i].astype(np.float64), imgs[i], cfg.crf,
                              dtype=torch.float32)
            pm = binarize_and_select(marg, self.step, cfg.train.min_pixels)
            if pm.valid:
                keep.append(i)
                masks.append(pm.mask)
        if not keep:
            return zero, 0
        target = torch.from_numpy(np.stack(masks)).to(self.device)
        det = losses.detector_bce(logits[keep], target.to(logits.dtype))
        return det, len(keep)

    # ------------------------------------------------------------------- steps

    def train_step(self, batch) -> dict:
        phase = self.phase_at(self.step)
        self._apply_phase_modes(phase)
        lr = lr_at(self.step, self.total_steps, self.cfg.train.base_lr,
                   self.cfg.train.lr_power) * self.lr_mult

        attempts = 0
        while True:
            out = self._compute_losses(batch, phase)
            if bool(torch.isfinite(out["total"])):
                break
            attempts += 1
            self._log({"step": self.step, "event": "nonfinite_retry",
                       "attempt": attempts, "lr_mult": self.lr_mult})
            if attempts > 3:
                raise NumericalError(
                    f"non-finite loss at step {self.step} after "
                    f"{attempts - 1} LR halvings")
            self.lr_mult *= 0.5
            lr = lr_at(self.step, self.total_steps, self.cfg.train.base_lr,
                       self.cfg.train.lr_power) * self.lr_mult

        active = "cls" if phase == "cls" else "rec"
        stepped = [self.opts[active]]
        if isinstance(out["det"], torch.Tensor) and out["det"].requires_grad:
            stepped.append(self.opts["det"])
        for opt in stepped:
            scale = self.cfg.detector.lr_scale if opt is self.opts["det"] else 1.0
            for g in opt.param_groups:
                g["lr"] = lr * scale
            opt.zero_grad(set_to_none=True)
        out["total"].backward()
        for opt in stepped:
            opt.step()
        if isinstance(self.models["fusion"], PathAttention):
            self.models["fusion"].bank.remask()

        def _f(v):
            return float(v.detach()) if torch.is_tensor(v) else float(v)

        record = {"step": self.step, "phase": phase, "lr": lr,
                  "total": _f(out["total"]), "bce": _f(out["bce"]),
                  "crack": _f(out["crack"]), "road": _f(out["road"]),
                  "consistency": _f(out["consistency"]),
                  "det": _f(out["det"]), "n_pseudo": out["n_pseudo"]}
        if self.step % max(self.cfg.train.log_every, 1) == 0:
            self._log(record)
        if record["total"] < self.best_loss:
            self.best_loss = record["total"]
            self.best_step = self.step
        self.step += 1
        return record

    def next_batch(self):
        epoch = self.step // self.batches_per_epoch
        pos = self.step % self.batches_per_epoch
        order = epoch_indices(len(self.manifest), epoch, self.cfg.train.seed)
        bs = self.cfg.data.batch_size
        idx = order[pos * bs:(pos + 1) * bs]
        return load_batch(self.manifest, idx, self.cfg.data.input_size,
                          self.cfg.data.normalize_mean,
                          self.cfg.data.normalize_std,
                          augment=self.cfg.data.hflip,
                          seed=self.cfg.train.seed * 1000003 + self.step)

    def checkpoint_path(self) -> Path:
        return self.run_dir / "checkpoints" / f"step_{self.step}.pkl"

    def run(self, max_steps: int = None) -> dict:
        last = {}
        every = self.cfg.train.checkpoint_every
        stop = self.total_steps if max_steps is None \
            else min(self.total_steps, self.step + max_steps)
        while self.step < stop:
            last = self.train_step(self.next_batch())
            if self.run_dir and every > 0 and self.step % every == 0 \
                    and self.step < stop:
                self.save_checkpoint(self.checkpoint_path())
        if self.run_dir:
            self.save_checkpoint(self.checkpoint_path())
            if self._log_fh:
                self._log_fh.flush()
        return last

    def _log(self, record: dict):
        if self._log_fh:
            self._log_fh.write(json.dumps(record) + "\n")

    def close(self):
        if self._log_fh:
            self._log_fh.close()
            self._log_fh = None

    # ------------------------------------------------------------- checkpoints

    def _state_blob(self) -> dict:
        def arrs(module):
            return {k: v.detach().cpu().numpy().copy()
                    for k, v in module.state_dict().items()}

        return {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "backbone": self.cfg.model.backbone,
            "step": self.step,
            "lr_mult": self.lr_mult,
            "best": {"loss": self.best_loss, "step": self.best_step},
            "models": {name: arrs(m) for name, m in self.models.items()},
            "opts": {name: _pack(o.state_dict()) for name, o in self.opts.items()},
            "torch_rng": torch.get_rng_state().numpy().tobytes(),
            # canonical text form: identical content pickles to identical
            # bytes regardless of string interning history
            "config": dumps_toml(config_to_dict(self.cfg)),
        }

    def save_checkpoint(self, path) -> None:
        Path(path).write_bytes(pickle.dumps(self._state_blob(), protocol=4))

    @classmethod
    def resume(cls, path, manifest: DatasetManifest, cfg: Config = None,
               run_dir=None, device: str = None) -> "Trainer":
        blob = _read_blob(path)
        saved_cfg = config_from_dict(loads_toml(blob["config"]))
        if cfg is not None and cfg.model.backbone != blob["backbone"]:
            raise CheckpointError(
                f"checkpoint was trained with backbone {blob['backbone']!r}, "
                f"config requests {cfg.model.backbone!r}")
        trainer = cls(cfg or saved_cfg, manifest, run_dir=run_dir, device=device)
        for name, arrays in blob["models"].items():
            if name not in trainer.models:
                raise CheckpointError(f"checkpoint has unknown module {name!r}")
            state = {k: torch.from_numpy(np.asarray(v)) for k, v in arrays.items()}
            trainer.models[name].load_state_dict(state)
        for name, packed in blob["opts"].items():
            trainer.opts[name].load_state_dict(_unpack(packed))
        trainer.step = blob["step"]
        trainer.lr_mult = blob["lr_mult"]
        trainer.best_loss = blob["best"]["loss"]
        trainer.best_step = blob["best"]["step"]
        torch.set_rng_state(torch.frombuffer(
            bytearray(blob["torch_rng"]), dtype=torch.uint8).clone())
        return trainer


def _pack(obj):
    """Recursively convert torch tensors to numpy for deterministic pickling."""
    if isinstance(obj, torch.Tensor):
        return {"__tensor__": obj.detach().cpu().numpy().copy()}
    if isinstance(obj, dict):
        return {k: _pack(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        packed = [_pack(v) for v in obj]
        return packed if isinstance(obj, list) else tuple(packed)
    return obj


def _unpack(obj):
    if isinstance(obj, dict):
        if set(obj.keys()) == {"__tensor__"}:
            return torch.from_numpy(np.asarray(obj["__tensor__"]).copy())
        return {k: _unpack(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        un = [_unpack(v) for v in obj]
        return un if isinstance(obj, list) else tuple(un)
    return obj


def _read_blob(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        blob = pickle.loads(path.read_bytes())
        version = blob["format_version"]
    except Exception as e:
        raise CheckpointError(f"unreadable checkpoint {path}: {e}") from e
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} unsupported")
    return blob


def checkpoint_info(path) -> dict:
    """Cheap metadata peek without instantiating models."""
    blob = _read_blob(path)
    return {"step": blob["step"], "backbone": blob["backbone"],
            "format_version": blob["format_version"]}


def load_for_eval(path, device: str = "cpu"):
    """Rebuild models from a checkpoint for inference. Returns (cfg, models)."""
    blob = _read_blob(path)
    cfg = validate_config(config_from_dict(loads_toml(blob["config"])))
    models = build_models(cfg.model, cfg.attention)
    for name, arrays in blob["models"].items():
        if name not in models:
            raise CheckpointError(f"checkpoint has unknown module {name!r}")
        state = {k: torch.from_numpy(np.asarray(v)) for k, v in arrays.items()}
        models[name].load_state_dict(state)
    for m in models.values():
        m.to(torch.device(device))
        m.eval()
    return cfg, models
