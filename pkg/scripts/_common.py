"""Shared helpers for the experiment scripts."""

from dataclasses import replace

from kda.datahub import SynthConfig, generate_synthetic
from kda.evaluation import heldout_align_loss
from kda.model import ModelConfig, init_model
from kda.trainer import TrainConfig, fit

DEFAULT_SYNTH = SynthConfig(seen_count=5, unseen_count=3, samples_per_class=100, audio_dim=64, visual_dim=64,
                            text_dim=32, modality_noise=0.1)


def train_once(ds, train_cfg: TrainConfig, **model_kw):
    model = init_model(ModelConfig(audio_dim=ds.audio_dim, visual_dim=ds.visual_dim, text_dim=ds.text_dim,
                                   **model_kw), train_cfg.seed)
    report = fit(model, ds, train_cfg)
    best = report.epochs[report.best_epoch - 1].result
    return model, report, best, heldout_align_loss(model, ds)


def synth(seed: int):
    return generate_synthetic(replace(DEFAULT_SYNTH, seed=seed))
