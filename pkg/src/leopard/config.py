"""Run configuration: profile files (INI-style sections of flat
key/value pairs), task manifests and the paper/desk default profiles."""

import configparser
import json
import os
from dataclasses import dataclass, field

from .data import TaskSpec, Vocabulary, load_task
from .encoder import EncoderConfig
from .meta import MetaConfig

PROFILE_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.dirname(
    os.path.abspath(__file__)))), "configs")

DESK_PROFILE = {
    "encoder": {
        "n_layers": 4, "d_model": 64, "n_heads": 4, "d_ff": 128, "max_len": 32,
        "attention_dropout": 0.0, "hidden_dropout": 0.0, "cls_dropout": 0.0,
        "class_embedding_size": 32,
    },
    "training": {
        "batch_size": 4, "min_adapted_layer": 0, "outer_lr": 1e-3,
        "adaptation_steps": 2, "tasks_per_batch": 4, "episodes": 1000,
        "alpha_init": 1e-3, "warmup_frac": 0.0, "seed": 0,
        "train_word_embeddings": True, "data_sampling": "square_root",
        "lowercase": False,
    },
    "finetune": {"epochs_k4": 50, "epochs_k8": 50, "epochs_k16": 50, "lr": 1e-3},
}

PAPER_PROFILE = {
    "encoder": {
        "n_layers": 12, "d_model": 768, "n_heads": 12, "d_ff": 3072, "max_len": 128,
        "attention_dropout": 0.1, "hidden_dropout": 0.1, "cls_dropout": 0.1,
        "class_embedding_size": 256,
    },
    "training": {
        "batch_size": 10, "min_adapted_layer": 0, "outer_lr": 1e-5,
        "adaptation_steps": 7, "tasks_per_batch": 1, "episodes": 100000,
        "alpha_init": 1e-3, "warmup_frac": 0.1, "seed": 0,
        "train_word_embeddings": True, "data_sampling": "square_root",
        "lowercase": False,
    },
    "finetune": {"epochs_k4": 150, "epochs_k8": 100, "epochs_k16": 100, "lr": 1e-3},
}


@dataclass
class RunConfig:
    encoder: dict = field(default_factory=lambda: dict(DESK_PROFILE["encoder"]))
    training: dict = field(default_factory=lambda: dict(DESK_PROFILE["training"]))
    finetune: dict = field(default_factory=lambda: dict(DESK_PROFILE["finetune"]))

    def encoder_config(self, vocab_size):
        e = self.encoder
        return EncoderConfig(
            n_layers=int(e["n_layers"]), d_model=int(e["d_model"]),
            n_heads=int(e["n_heads"]), d_ff=int(e["d_ff"]), max_len=int(e["max_len"]),
            vocab_size=vocab_size,
            attn_dropout=float(e["attention_dropout"]),
            hidden_dropout=float(e["hidden_dropout"]),
            cls_dropout=float(e["cls_dropout"]),
            class_embed_size=int(e["class_embedding_size"]))

    def meta_config(self, **overrides):
        t = self.training
        kw = dict(
            adaptation_steps=int(t["adaptation_steps"]),
            outer_lr=float(t["outer_lr"]),
            tasks_per_batch=int(t["tasks_per_batch"]),
            k=int(t["batch_size"]),
            nu=int(t["min_adapted_layer"]),
            episodes=int(t["episodes"]),
            seed=int(t["seed"]),
            alpha_init=float(t["alpha_init"]),
            warmup_frac=float(t["warmup_frac"]))
        kw.update(overrides)
        return MetaConfig(**kw)

    def epochs_for_k(self, k):
        return int(self.finetune.get(f"epochs_k{k}", self.finetune.get("epochs_k4", 50)))

    def as_dict(self):
        return {"encoder": self.encoder, "training": self.training,
                "finetune": self.finetune}


def _coerce(value):
    low = value.strip().lower()
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            continue
    return value.strip()


def load_profile(path):
    """Read an INI-style profile over the desk defaults."""
    cp = configparser.ConfigParser()
    with open(path) as f:
        cp.read_file(f)
    cfg = RunConfig()
    for section in cp.sections():
        target = getattr(cfg, section, None)
        if target is None:
            raise ValueError(f"unknown profile section [{section}] in {path}")
        for key, value in cp[section].items():
            target[key] = _coerce(value)
    return cfg


def builtin_profile(name):
    if name == "desk":
        return RunConfig()
    if name == "paper":
        return RunConfig(encoder=dict(PAPER_PROFILE["encoder"]),
                         training=dict(PAPER_PROFILE["training"]),
                         finetune=dict(PAPER_PROFILE["finetune"]))
    raise ValueError(f"unknown builtin profile {name!r} (use 'desk' or 'paper')")


def write_profile(path, profile):
    cp = configparser.ConfigParser()
    for section, values in profile.items():
        cp[section] = {k: str(v) for k, v in values.items()}
    with open(path, "w") as f:
        cp.write(f)


def load_manifest(path):
    """Task manifest: JSON with a vocab path and a list of task specs.

    Returns (tasks: list of TaskData, vocab). Paths are resolved relative
    to the manifest file.
    """
    with open(path) as f:
        manifest = json.load(f)
    base = os.path.dirname(os.path.abspath(path))

    def resolve(p):
        return p if p is None or os.path.isabs(p) else os.path.join(base, p)

    vocab = Vocabulary.from_file(resolve(manifest["vocab"]))
    tasks = []
    for entry in manifest["tasks"]:
        spec = TaskSpec(name=entry["name"], kind=entry["kind"],
                        labels=tuple(entry["labels"]),
                        train_path=resolve(entry.get("train")),
                        val_path=resolve(entry.get("val")),
                        test_path=resolve(entry.get("test")))
        tasks.append(load_task(spec))
    return tasks, vocab
