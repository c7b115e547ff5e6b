"""Profile parsing, builtin defaults and manifest loading."""

import json

import pytest

from leopard.config import (DESK_PROFILE, PAPER_PROFILE, RunConfig,
                            builtin_profile, load_manifest, load_profile,
                            write_profile)


def test_desk_profile_defaults():
    cfg = builtin_profile("desk")
    enc = cfg.encoder_config(vocab_size=100)
    assert enc.n_layers == 4 and enc.d_model == 64 and enc.class_embed_size == 32
    mc = cfg.meta_config()
    assert mc.k == 4 and mc.nu == 0 and mc.adaptation_steps == 2
    assert cfg.epochs_for_k(4) == 50


def test_paper_profile_defaults():
    cfg = builtin_profile("paper")
    enc = cfg.encoder_config(vocab_size=30000)
    assert enc.n_layers == 12 and enc.d_model == 768 and enc.d_ff == 3072
    assert enc.max_len == 128 and enc.class_embed_size == 256
    assert enc.attn_dropout == 0.1 and enc.hidden_dropout == 0.1 and enc.cls_dropout == 0.1
    mc = cfg.meta_config()
    assert mc.adaptation_steps == 7
    assert mc.outer_lr == 1e-5
    assert mc.k == 10
    assert mc.nu == 0
    assert mc.warmup_frac == 0.1
    assert cfg.training["data_sampling"] == "square_root"
    assert cfg.training["lowercase"] is False
    assert cfg.epochs_for_k(4) == 150
    assert cfg.epochs_for_k(8) == 100
    assert cfg.epochs_for_k(16) == 100


def test_builtin_profile_unknown():
    with pytest.raises(ValueError):
        builtin_profile("laptop")


def test_profile_roundtrip(tmp_path):
    p = tmp_path / "x.profile"
    write_profile(p, PAPER_PROFILE)
    cfg = load_profile(p)
    assert cfg.encoder["n_layers"] == 12
    assert cfg.training["outer_lr"] == 1e-5
    assert cfg.training["lowercase"] is False


def test_profile_overrides_desk_defaults(tmp_path):
    p = tmp_path / "x.profile"
    p.write_text("[training]\nadaptation_steps = 9\n")
    cfg = load_profile(p)
    assert cfg.meta_config().adaptation_steps == 9
    # untouched keys keep desk values
    assert cfg.encoder["d_model"] == DESK_PROFILE["encoder"]["d_model"]


def test_profile_unknown_section(tmp_path):
    p = tmp_path / "x.profile"
    p.write_text("[mystery]\nfoo = 1\n")
    with pytest.raises(ValueError):
        load_profile(p)


def test_meta_config_overrides():
    mc = builtin_profile("desk").meta_config(episodes=3, seed=42)
    assert mc.episodes == 3 and mc.seed == 42


def test_load_manifest(tmp_path):
    (tmp_path / "vocab.txt").write_text("hello\nworld\n")
    rows = [{"text": "hello world", "label": "a"},
            {"text": "world", "label": "b"}]
    (tmp_path / "t1.jsonl").write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    manifest = {"vocab": "vocab.txt",
                "tasks": [{"name": "t1", "kind": "single", "labels": ["a", "b"],
                           "train": "t1.jsonl", "test": "t1.jsonl"}]}
    mp = tmp_path / "manifest.json"
    mp.write_text(json.dumps(manifest))
    tasks, vocab = load_manifest(mp)
    assert len(tasks) == 1
    assert tasks[0].name == "t1"
    assert len(tasks[0].train) == 2 and len(tasks[0].test) == 2
    assert tasks[0].val == []
    assert "hello" in vocab
