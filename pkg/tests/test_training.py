"""Contrastive loss math, train_step mechanics, and the dual-path loop."""

import math
from dataclasses import replace

import numpy as np
import pytest

from icar.complexity.model import ComplexityModel
from icar.encoders.text import TextEncoder, TextEncoderConfig
from icar.encoders.vit import MiniViT, VisionEncoderConfig
from icar.errors import ContractError, TrainingDivergedError
from icar.numerics import Tape, Tensor, backward, ops
from icar.numerics.gradcheck import finite_diff_check
from icar.synthdata.manifest import SceneSample
from icar.synthdata.scenes import (category_id, complexity_score,
                                   render_caption, render_scene,
                                   sample_scene_specs, tokenize)
from icar.training import (DualPathConfig, HISTORY_COLUMNS,
                           clip_contrastive_loss, dual_path_loss, evaluate_r1,
                           load_icar, make_optimizer, save_icar, select_exits,
                           train_loop, train_step, write_history_csv)

TINY_VIT = VisionEncoderConfig(image_size=16, patch_size=4, depth=3, width=16,
                               heads=2, embed_dim=8, exit_layers=(1, 2, 3))
TINY_TEXT = TextEncoderConfig(max_len=24, depth=1, width=16, heads=2,
                              embed_dim=8)
TINY_CFG = DualPathConfig(exit_rule="fixed", exit_layer=1, batch_size=8,
                          epochs=2, lr_backbone=1e-3, lr_heads=1e-2)


def unit_rows(rng, b, e):
    m = rng.normal(size=(b, e))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def toy_samples(n, seed=0, image_size=16, max_objects=2):
    """In-memory paired samples, 3:1 train:val."""
    specs = sample_scene_specs(seed, n, max_objects)
    out = []
    for i, spec in enumerate(specs):
        caption = render_caption(spec)
        score = complexity_score(spec.object_count, spec.background_noise,
                                 max_objects)
        out.append(SceneSample(
            image=render_scene(spec, image_size),
            tokens=tokenize(caption), text=caption, score=score,
            label=score > 0.5, instance_id=i, category_id=category_id(spec),
            split="val" if i % 4 == 3 else "train"))
    return out


def tiny_models(seed=0):
    return MiniViT(TINY_VIT, seed=seed), TextEncoder(TINY_TEXT, seed=seed + 1)


# ---------------------------------------------------------------------------
# clip_contrastive_loss


def test_single_pair_loss_is_exactly_zero():
    rng = np.random.default_rng(0)
    img = Tensor(unit_rows(rng, 1, 8))
    txt = Tensor(unit_rows(rng, 1, 8))
    assert clip_contrastive_loss(img, txt, 0.07).item() == 0.0


def test_orthogonal_aligned_pairs_worked_value():
    # identity similarity matrix at temperature 1: both directions give
    # cross-entropy log(1 + e^-1) per row
    img = Tensor(np.eye(2))
    txt = Tensor(np.eye(2))
    loss = clip_contrastive_loss(img, txt, temperature=1.0).item()
    assert abs(loss - math.log(1.0 + math.exp(-1.0))) <= 1e-9


def test_non_unit_rows_rejected():
    rng = np.random.default_rng(1)
    img = Tensor(unit_rows(rng, 3, 8) * 1.01)
    txt = Tensor(unit_rows(rng, 3, 8))
    with pytest.raises(ContractError, match="unit-norm"):
        clip_contrastive_loss(img, txt)
    with pytest.raises(ContractError, match="unit-norm"):
        clip_contrastive_loss(txt, img)


def test_shape_mismatch_rejected():
    rng = np.random.default_rng(2)
    with pytest.raises(ContractError):
        clip_contrastive_loss(Tensor(unit_rows(rng, 3, 8)),
                              Tensor(unit_rows(rng, 4, 8)))


def test_temperature_must_be_positive():
    rng = np.random.default_rng(3)
    embs = Tensor(unit_rows(rng, 2, 4))
    with pytest.raises(ContractError):
        clip_contrastive_loss(embs, embs, temperature=0.0)


def test_joint_permutation_invariance():
    rng = np.random.default_rng(4)
    img = unit_rows(rng, 6, 8)
    txt = unit_rows(rng, 6, 8)
    base = clip_contrastive_loss(Tensor(img), Tensor(txt)).item()
    for _ in range(5):
        perm = rng.permutation(6)
        permuted = clip_contrastive_loss(Tensor(img[perm]),
                                         Tensor(txt[perm])).item()
        assert abs(permuted - base) <= 1e-12


def test_breaking_alignment_increases_loss():
    rng = np.random.default_rng(5)
    img = unit_rows(rng, 5, 8)
    aligned = clip_contrastive_loss(Tensor(img), Tensor(img)).item()
    deranged = clip_contrastive_loss(Tensor(img),
                                     Tensor(img[[1, 2, 3, 4, 0]])).item()
    assert deranged > aligned


def test_loss_nonnegative():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        loss = clip_contrastive_loss(Tensor(unit_rows(rng, 7, 6)),
                                     Tensor(unit_rows(rng, 7, 6))).item()
        assert loss >= 0.0


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(6)
    txt = Tensor(unit_rows(rng, 4, 6))
    raw = Tensor(rng.normal(size=(4, 6)), requires_grad=True)

    def f(x):
        return clip_contrastive_loss(ops.l2_normalize(x), txt, 0.2)

    assert finite_diff_check(f, raw, eps=1e-5) < 1e-4


# ---------------------------------------------------------------------------
# DualPathConfig and exit selection


def test_config_rejects_bad_values():
    with pytest.raises(ContractError):
        DualPathConfig(alpha=1.5)
    with pytest.raises(ContractError):
        DualPathConfig(temperature=-0.1)
    with pytest.raises(ContractError):
        DualPathConfig(lr_backbone=1e-2, lr_heads=1e-3)
    with pytest.raises(ContractError):
        DualPathConfig(exit_rule="sometimes")
    with pytest.raises(ContractError):
        DualPathConfig(epochs=-1)


def test_config_allows_zero_learning_rates():
    cfg = DualPathConfig(lr_backbone=0.0, lr_heads=0.0)
    assert cfg.lr_backbone == 0.0


def test_select_exits_fixed_rule():
    cfg = DualPathConfig(exit_rule="fixed", exit_layer=2)
    images = np.full((5, 3, 16, 16), 0.5)
    exits = select_exits(None, images, cfg, depth=3)
    assert exits.tolist() == [2] * 5


def test_select_exits_routed_rule_follows_threshold():
    # a zero-initialized binary head scores every image exactly 0.5
    clf = ComplexityModel(head="binary", image_size=16)
    images = np.full((4, 3, 16, 16), 0.5)
    all_complex = select_exits(
        clf, images, DualPathConfig(exit_rule="routed", exit_layer=1,
                                    threshold=0.5), depth=3)
    assert all_complex.tolist() == [3] * 4
    all_simple = select_exits(
        clf, images, DualPathConfig(exit_rule="routed", exit_layer=1,
                                    threshold=0.6), depth=3)
    assert all_simple.tolist() == [1] * 4


def test_routed_rule_requires_model():
    cfg = DualPathConfig(exit_rule="routed")
    with pytest.raises(ContractError, match="complexity model"):
        select_exits(None, np.zeros((2, 3, 16, 16)), cfg, depth=3)


# ---------------------------------------------------------------------------
# dual_path_loss


def test_alpha_boundaries_are_exact():
    vit, txt = tiny_models()
    batch = toy_samples(4)[:4]
    base = dict(exit_rule="fixed", exit_layer=1)
    pair0, _, _ = dual_path_loss(vit, txt, None, batch,
                                 DualPathConfig(alpha=0.0, **base))
    assert pair0.loss_total == pair0.loss_full
    pair1, _, _ = dual_path_loss(vit, txt, None, batch,
                                 DualPathConfig(alpha=1.0, **base))
    assert pair1.loss_total == pair1.loss_early


def test_alpha_half_is_the_mean():
    vit, txt = tiny_models()
    batch = toy_samples(4)[:4]
    pair, _, _ = dual_path_loss(
        vit, txt, None, batch,
        DualPathConfig(alpha=0.5, exit_rule="fixed", exit_layer=1))
    mean = 0.5 * (pair.loss_early + pair.loss_full)
    assert abs(pair.loss_total - mean) <= 1e-12


def test_text_encoder_runs_once_per_loss():
    vit, txt = tiny_models()
    batch = toy_samples(4)[:4]
    before = txt.forward_calls
    dual_path_loss(vit, txt, None, batch,
                   DualPathConfig(exit_rule="fixed", exit_layer=1))
    assert txt.forward_calls == before + 1


def test_single_sample_batch_gives_zero_loss():
    vit, txt = tiny_models()
    batch = toy_samples(4)[:1]
    pair, _, _ = dual_path_loss(vit, txt, None, batch,
                                DualPathConfig(exit_rule="fixed",
                                               exit_layer=1))
    assert pair.loss_total == 0.0


def test_reported_exits_match_rule():
    vit, txt = tiny_models()
    batch = toy_samples(4)[:3]
    _, _, exits = dual_path_loss(
        vit, txt, None, batch,
        DualPathConfig(exit_rule="fixed", exit_layer=2))
    assert exits.tolist() == [2, 2, 2]


# ---------------------------------------------------------------------------
# train_step


def test_zero_lr_step_leaves_parameters_bitwise_unchanged():
    vit, txt = tiny_models()
    cfg = DualPathConfig(exit_rule="fixed", exit_layer=1, lr_backbone=0.0,
                         lr_heads=0.0)
    opt = make_optimizer(vit, txt, cfg)
    batch = toy_samples(8)[:8]
    before = {n: t.data.copy() for m in (vit, txt) for n, t in
              ((f"{id(m)}.{k}", v) for k, v in m.params.items())}
    train_step(vit, txt, None, batch, cfg, opt)
    after = {n: t.data for m in (vit, txt) for n, t in
             ((f"{id(m)}.{k}", v) for k, v in m.params.items())}
    for name, data in before.items():
        assert np.array_equal(data, after[name])


def test_single_step_descends_on_fixed_batch():
    cfg = DualPathConfig(exit_rule="fixed", exit_layer=1, lr_backbone=1e-3,
                         lr_heads=1e-2)
    improved = 0
    for seed in range(5):
        vit, txt = tiny_models(seed=seed)
        batch = toy_samples(8, seed=seed)[:8]
        before, _, _ = dual_path_loss(vit, txt, None, batch, cfg)
        opt = make_optimizer(vit, txt, cfg)
        train_step(vit, txt, None, batch, cfg, opt)
        after, _, _ = dual_path_loss(vit, txt, None, batch, cfg)
        improved += after.loss_total < before.loss_total
    assert improved >= 4


def test_step_gradients_match_finite_differences_on_sampled_params():
    vit, txt = tiny_models()
    batch = toy_samples(4)[:4]
    cfg = DualPathConfig(exit_rule="fixed", exit_layer=1)
    with Tape() as tape:
        _, total, _ = dual_path_loss(vit, txt, None, batch, cfg)
    backward(total, tape)

    def loss_value():
        pair, _, _ = dual_path_loss(vit, txt, None, batch, cfg)
        return pair.loss_total

    rng = np.random.default_rng(0)
    named = [(f"vit.{k}", t) for k, t in vit.params.items()]
    named += [(f"text.{k}", t) for k, t in txt.params.items()]
    eps = 1e-5
    for _ in range(10):
        name, tensor = named[rng.integers(len(named))]
        idx = tuple(rng.integers(s) for s in tensor.shape)
        assert tensor.grad is not None, name
        saved = tensor.data[idx]
        tensor.data[idx] = saved + eps
        up = loss_value()
        tensor.data[idx] = saved - eps
        down = loss_value()
        tensor.data[idx] = saved
        numeric = (up - down) / (2.0 * eps)
        tape_g = tensor.grad[idx]
        rel = abs(numeric - tape_g) / (abs(tape_g) + 1e-8)
        # key biases have an analytically zero gradient (softmax shift
        # invariance), where the relative form only measures fp noise
        both_zero = abs(numeric) < 1e-7 and abs(tape_g) < 1e-7
        assert rel < 1e-4 or both_zero, \
            f"{name}{idx}: {numeric} vs {tape_g}"


def test_diverged_step_raises_with_similarity_diagnostics():
    vit, txt = tiny_models()
    cfg = DualPathConfig(exit_rule="fixed", exit_layer=1, lr_backbone=1e30,
                         lr_heads=1e30)
    opt = make_optimizer(vit, txt, cfg)
    batch = toy_samples(8)[:8]
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        with pytest.raises(TrainingDivergedError) as info:
            for _ in range(10):
                train_step(vit, txt, None, batch, cfg, opt)
    assert "similarity" in info.value.diagnostics
    assert "batch" in info.value.diagnostics["similarity"]


# ---------------------------------------------------------------------------
# train_loop


@pytest.fixture(scope="module")
def dataset():
    return toy_samples(32, seed=11)


def test_evaluate_r1_oracles():
    # one candidate: the only image is the true one, R@1 is exactly 1
    vit, txt = tiny_models()
    single = toy_samples(1, seed=3)
    assert evaluate_r1(vit, txt, single, exit_layer=1) == 1.0

    # three identical images tie; ascending-id break hands every query
    # the lowest id, so only that query scores — R@1 is exactly 1/3
    base = toy_samples(1, seed=4)[0]
    clones = [replace(base, instance_id=i) for i in range(3)]
    assert evaluate_r1(vit, txt, clones, exit_layer=1) == pytest.approx(1 / 3)


def test_zero_epochs_give_empty_history(dataset):
    vit, txt = tiny_models()
    snapshot = {k: t.data.copy() for k, t in vit.params.items()}
    out_vit, out_txt, history = train_loop(
        dataset, DualPathConfig(exit_rule="fixed", exit_layer=1, epochs=0),
        vit=vit, text_encoder=txt)
    assert history == []
    assert out_vit is vit and out_txt is txt
    for k, v in snapshot.items():
        assert np.array_equal(v, vit.params[k].data)


def test_history_rows_and_columns(dataset):
    vit, txt = tiny_models()
    _, _, history = train_loop(dataset, TINY_CFG, vit=vit, text_encoder=txt)
    assert len(history) == TINY_CFG.epochs
    for epoch, row in enumerate(history):
        assert tuple(row) == HISTORY_COLUMNS
        assert row["epoch"] == epoch
        assert np.isfinite([row[c] for c in HISTORY_COLUMNS[1:]]).all()
        assert 0.0 <= row["val_r1_early"] <= 1.0
        assert 0.0 <= row["val_r1_full"] <= 1.0


def test_training_is_deterministic(dataset):
    runs = []
    for _ in range(2):
        vit, txt = tiny_models(seed=3)
        runs.append(train_loop(dataset, TINY_CFG, vit=vit, text_encoder=txt))
    (vit_a, txt_a, hist_a), (vit_b, txt_b, hist_b) = runs
    for row_a, row_b in zip(hist_a, hist_b):
        for col in HISTORY_COLUMNS:
            assert abs(row_a[col] - row_b[col]) <= 1e-12
    for k in vit_a.params:
        assert np.array_equal(vit_a.params[k].data, vit_b.params[k].data)
    for k in txt_a.params:
        assert np.array_equal(txt_a.params[k].data, txt_b.params[k].data)


def test_final_parameters_are_best_epoch(dataset):
    vit, txt = tiny_models(seed=5)
    vit2, txt2, history = train_loop(dataset, TINY_CFG, vit=vit,
                                     text_encoder=txt)
    val = [s for s in dataset if s.split == "val"]
    from icar.training import evaluate_r1

    kept = (evaluate_r1(vit2, txt2, val, TINY_CFG.exit_layer)
            + evaluate_r1(vit2, txt2, val, TINY_VIT.depth))
    best = max(r["val_r1_early"] + r["val_r1_full"] for r in history)
    assert abs(kept - best) <= 1e-12


def test_empty_split_rejected(dataset):
    train_only = [s for s in dataset if s.split == "train"]
    with pytest.raises(ContractError, match="val"):
        train_loop(train_only, TINY_CFG, vit=tiny_models()[0],
                   text_encoder=tiny_models()[1])


def test_exit_layer_must_exist_in_model(dataset):
    vit, txt = tiny_models()
    cfg = DualPathConfig(exit_rule="fixed", exit_layer=7, epochs=1)
    with pytest.raises(ContractError, match="exit"):
        train_loop(dataset, cfg, vit=vit, text_encoder=txt)


def test_history_csv_roundtrip(tmp_path, dataset):
    vit, txt = tiny_models()
    _, _, history = train_loop(dataset, TINY_CFG, vit=vit, text_encoder=txt)
    path = tmp_path / "history.csv"
    write_history_csv(path, history, comment="config-hash=deadbeef")
    lines = path.read_text().splitlines()
    assert lines[0] == "# config-hash=deadbeef"
    assert lines[1] == ",".join(HISTORY_COLUMNS)
    assert len(lines) == 2 + len(history)
    reparsed = [float(v) for v in lines[2].split(",")]
    assert reparsed[0] == 0.0


def test_combined_checkpoint_roundtrip(tmp_path, dataset):
    vit, txt = tiny_models(seed=9)
    path = tmp_path / "model.ckpt"
    save_icar(path, vit, txt)
    vit2, txt2 = load_icar(path)
    images = np.stack([s.image for s in dataset[:4]])
    tokens = [s.tokens for s in dataset[:4]]
    assert np.array_equal(vit.encode(images, 3).data,
                          vit2.encode(images, 3).data)
    assert np.array_equal(txt.encode(tokens).data, txt2.encode(tokens).data)
    assert vit2.config == TINY_VIT and txt2.config == TINY_TEXT
