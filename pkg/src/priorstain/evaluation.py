"""Checkpoint evaluation with the validation-then-test threshold protocol.

The Ki67 positivity threshold is chosen on the validation split and frozen
to ``tau.json``; a test-split evaluation refuses to run until that file
exists.  Datasets without a Ki67 channel need no threshold.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
import torch

from .core import to_unit_range
from .errors import ConfigurationError, ProtocolError, UndefinedFractionError
from .metrics import (
    Ki67Threshold, MetricReport, default_feature_backend, detect_instances, ki67_image_error,
    nuclei_count_delta, perceptual_distance, pmae, select_tau, ssim,
)
from .models import ddpm_sample, load_checkpoint
from .runs import update_run_manifest, write_run_manifest
from .training import ExperimentConfig, input_tensor, select_split

log = logging.getLogger(__name__)

TAU_FILE = "tau.json"
MARKER = "Ki67"
PANEL_FILE = "panel_samples.npz"
N_PANEL = 4


@torch.no_grad()
def predict(model, payload: dict, samples, batch_size: int = 16, seed: int = 0) -> list[np.ndarray]:
    """Per-sample HxWxK predictions in [0,1]."""
    cfg = ExperimentConfig.from_dict(payload["config"])
    x = input_tensor(samples, cfg)
    outs = []
    for i in range(0, x.shape[0], batch_size):
        xb = x[i:i + batch_size]
        if payload.get("schedule_obj") is not None:
            y = ddpm_sample(payload["schedule_obj"], model, xb, seed=seed + i, out_channels=cfg.out_channels)
        else:
            y = model(xb)
        outs.extend(((y.permute(0, 2, 3, 1).numpy() + 1.0) / 2.0).clip(0.0, 1.0))
    return [o.astype(np.float64) for o in outs]


def _marker_index(channel_names) -> int | None:
    names = list(channel_names)
    return names.index(MARKER) if MARKER in names else None


def per_case_records(samples, preds, tau: Ki67Threshold | None, feature_backend=None) -> list[dict]:
    feature_backend = feature_backend or default_feature_backend()
    records = []
    for s, p in zip(samples, preds):
        gt = to_unit_range(s.mif.data, s.mif.value_range).astype(np.float64)
        nuc = s.mif.nuclear_channel_index
        delta, rel = nuclei_count_delta(p[:, :, nuc], gt[:, :, nuc])
        rec = {
            "case_id": s.case_id,
            "patch_id": s.patch_id,
            "ssim": ssim(p, gt),
            "lpips_like": perceptual_distance(p, gt, feature_backend),
            "pmae": pmae(p[:, :, nuc], gt[:, :, nuc]),
            "nuclei_count_delta": float(delta),
            "nuclei_count_rel": float(rel),
            "ki67_error": None,
            "ki67_skipped": False,
        }
        mi = _marker_index(s.mif.channel_names)
        if mi is not None and tau is not None:
            inst = detect_instances(gt[:, :, nuc])
            try:
                rec["ki67_error"] = ki67_image_error(p[:, :, mi], gt[:, :, mi], inst, tau)
            except UndefinedFractionError:
                rec["ki67_skipped"] = True
        records.append(rec)
    return records


def choose_tau(samples, preds) -> Ki67Threshold | None:
    """Select the positivity threshold on (validation) predictions."""
    cases = []
    for s, p in zip(samples, preds):
        mi = _marker_index(s.mif.channel_names)
        if mi is None:
            return None
        gt = to_unit_range(s.mif.data, s.mif.value_range)
        inst = detect_instances(gt[:, :, s.mif.nuclear_channel_index])
        cases.append((p[:, :, mi], gt[:, :, mi], inst))
    return select_tau(cases)


def load_tau(out_dir) -> Ki67Threshold | None:
    path = Path(out_dir) / TAU_FILE
    if not path.exists():
        return None
    return Ki67Threshold.from_dict(json.loads(path.read_text()))


def evaluate(checkpoint, samples, split: str, out_dir, tau_dir=None, seed: int = 0) -> MetricReport:
    """Evaluate ``checkpoint`` on ``samples`` (all from ``split``) and write report files.

    ``split='val'`` selects and freezes the threshold into ``out_dir/tau.json``.
    ``split='test'`` reads the frozen threshold from ``tau_dir`` (default
    ``out_dir``) and raises :class:`ProtocolError` if none was frozen.
    """
    out = Path(out_dir)
    model, payload = load_checkpoint(checkpoint)
    cfg = ExperimentConfig.from_dict(payload["config"])
    if samples and samples[0].mif.channels != cfg.out_channels:
        raise ConfigurationError(
            f"checkpoint predicts {cfg.out_channels} channels, dataset has {samples[0].mif.channels}")
    needs_tau = bool(samples) and _marker_index(samples[0].mif.channel_names) is not None
    tau = None
    if split == "test" and needs_tau:
        tau = load_tau(tau_dir or out)
        if tau is None or tau.selected_on != "validation":
            raise ProtocolError("the Ki67 threshold is not frozen; run evaluation on the val split first")
    manifest = out / "run_manifest.json"
    if not manifest.exists():
        write_run_manifest(out, "eval", payload["config"], seed, checkpoint=str(checkpoint))
    update_run_manifest(out, accessed_cases={s.case_id: split for s in samples})

    preds = predict(model, payload, samples, cfg.batch_size, seed)
    if split != "test" and needs_tau:
        tau = choose_tau(samples, preds)
        if split == "val":
            (out / TAU_FILE).write_text(json.dumps(tau.to_dict(), indent=2) + "\n")
    records = per_case_records(samples, preds, tau)
    report = MetricReport(records, cfg.hash(), tau, split,
                          {"arch": cfg.arch, "condition": cfg.condition, "checkpoint": str(checkpoint),
                           "channel_names": list(samples[0].mif.channel_names) if samples else []})
    report.save(out / f"report_{split}.json", out / f"report_{split}.csv")
    if split == "test":
        _save_panels(out / PANEL_FILE, samples, preds, cfg)
    return report


def _save_panels(path, samples, preds, cfg) -> None:
    from .training import prior_map

    keep = list(range(min(N_PANEL, len(samples))))
    priors = []
    for i in keep:
        s = samples[i]
        priors.append(prior_map(s, cfg) if cfg.prior_mode != "none" else np.zeros(s.ihc.data.shape[:2]))
    np.savez(
        path,
        ihc=np.stack([to_unit_range(samples[i].ihc.data, samples[i].ihc.value_range) for i in keep]),
        prior=np.stack(priors),
        gt=np.stack([to_unit_range(samples[i].mif.data, samples[i].mif.value_range) for i in keep]),
        pred=np.stack([preds[i] for i in keep]),
        channel_names=np.array(samples[0].mif.channel_names),
        keys=np.array([samples[i].key for i in keep]),
    )


def evaluate_protocol(checkpoint, samples, splits, out_dir, seed: int = 0) -> MetricReport:
    """Validation pass (freezes the threshold) followed by the test pass; returns the test report."""
    evaluate(checkpoint, select_split(samples, splits, "val"), "val", out_dir, seed=seed)
    return evaluate(checkpoint, select_split(samples, splits, "test"), "test", out_dir, seed=seed)
