"""Loss arithmetic, the two-round schedule, gradient checks, and checkpoints."""

import math

import mpmath
import pytest
import torch

from mltfr import (
    BackboneConfig,
    ConfigurationError,
    FilterConfig,
    Recommender,
    TrainConfig,
    bce_loss,
    check_gradients,
    load_checkpoint,
    save_checkpoint,
    train_two_rounds,
)
from mltfr.data import EvalInstance, InteractionSequence, batch_and_negatives
from mltfr.training import write_history
from mltfr.vocab import VocabEmbedding


def make_vocabs(n=2, v=8, d=6, dtype=torch.float64):
    out = []
    for i in range(n):
        gen = torch.Generator().manual_seed(100 + i)
        out.append(VocabEmbedding(torch.randn(v, d, generator=gen, dtype=dtype), name=f"v{i}"))
    return out


def make_model(variant="full", dtype=torch.float64, seed=0, n_items=12,
               style="causal", layers=1, d_emb=4, max_len=5, dropout=0.0):
    cfg = BackboneConfig(style=style, layers=layers, heads=2, d_emb=d_emb,
                         dropout=dropout, max_len=max_len)
    return Recommender(
        n_items=n_items, vocabularies=make_vocabs(dtype=dtype),
        backbone_cfg=cfg, filter_cfg=FilterConfig(top_k=3, tau=0.7),
        reprogram_heads=2, variant=variant, seed=seed, dtype=dtype,
    )


def make_train_data(n_users=12, n_items=12, length=5, seed=0):
    import random
    rng = random.Random(seed)
    train = [
        InteractionSequence(user_id=u, items=[rng.randint(1, n_items) for _ in range(length)])
        for u in range(1, n_users + 1)
    ]
    holdout = [
        EvalInstance(user_id=u, prefix=seq.items[:-1], target=seq.items[-1])
        for u, seq in enumerate(train, start=1)
    ]
    return train, holdout


class TestLoss:
    def test_zero_logit_pair_costs_two_log_two(self):
        pos = torch.zeros(4, dtype=torch.float64)
        neg = torch.zeros(4, dtype=torch.float64)
        expected = 4 * 2 * math.log(2.0)
        assert abs(bce_loss(pos, neg).item() - expected) < 1e-14

    def test_matches_high_precision_reference(self):
        mpmath.mp.dps = 50
        gen = torch.Generator().manual_seed(0)
        pos = 6 * torch.randn(100, dtype=torch.float64, generator=gen)
        neg = 6 * torch.randn(100, dtype=torch.float64, generator=gen)

        def ref_term(x, positive):
            s = 1 / (1 + mpmath.e ** (-mpmath.mpf(float(x))))
            return -mpmath.log(s if positive else 1 - s)

        expected = sum(ref_term(x, True) for x in pos) + sum(ref_term(x, False) for x in neg)
        got = bce_loss(pos, neg).item()
        assert abs(got - float(expected)) / abs(float(expected)) < 1e-10

    def test_extreme_logits_are_clamped(self):
        huge = torch.tensor([1000.0], dtype=torch.float64)
        capped = torch.tensor([30.0], dtype=torch.float64)
        assert torch.equal(bce_loss(huge, -huge), bce_loss(capped, -capped))

    def test_empty_slots_cost_nothing(self):
        empty = torch.zeros(0, dtype=torch.float64)
        assert bce_loss(empty, empty).item() == 0.0

    def test_shape_mismatch_is_an_error(self):
        with pytest.raises(ConfigurationError):
            bce_loss(torch.zeros(3), torch.zeros(4))

    def test_loss_is_a_sum_not_a_mean(self):
        one = bce_loss(torch.zeros(1, dtype=torch.float64), torch.zeros(1, dtype=torch.float64))
        five = bce_loss(torch.zeros(5, dtype=torch.float64), torch.zeros(5, dtype=torch.float64))
        assert abs(five.item() - 5 * one.item()) < 1e-12


class TestTrainConfig:
    def test_validation(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(batch_size=0)
        with pytest.raises(ConfigurationError):
            TrainConfig(lr=0.0)
        with pytest.raises(ConfigurationError):
            TrainConfig(epochs_round1=0)
        with pytest.raises(ConfigurationError):
            TrainConfig(fisher_fraction=0.0)


class TestTwoRounds:
    def make_cfg(self, **kwargs):
        defaults = dict(batch_size=4, lr=0.01, epochs_round1=2, epochs_round2=1,
                        seed=0, fisher_fraction=1.0)
        defaults.update(kwargs)
        return TrainConfig(**defaults)

    def test_full_variant_history_structure(self):
        model = make_model("full")
        train, holdout = make_train_data()
        result = train_two_rounds(model, train, holdout, 12, self.make_cfg())
        assert [(r.epoch, r.phase) for r in result.history] == [
            (0, "round1"), (1, "round1"), (2, "round2"),
        ]
        assert len(result.fisher) == 2
        assert model.sc is not None
        assert all(not p.requires_grad for p in model.sc.parameters())

    def test_other_variants_run_one_round(self):
        model = make_model("wo_sc")
        train, holdout = make_train_data()
        result = train_two_rounds(model, train, holdout, 12, self.make_cfg())
        assert [(r.epoch, r.phase) for r in result.history] == [
            (0, "round1"), (1, "round1"), (2, "round1"),
        ]
        assert result.fisher == []
        assert model.sc is None

    def test_loss_decreases_on_learnable_data(self):
        model = make_model("backbone_only", n_items=6)
        train = [
            InteractionSequence(user_id=u, items=[1, 2, 3, 4, 5])
            for u in range(1, 13)
        ]
        cfg = self.make_cfg(epochs_round1=8, epochs_round2=0, lr=0.05)
        result = train_two_rounds(model, train, [], 6, cfg)
        assert result.history[-1].loss < 0.5 * result.history[0].loss

    def test_training_is_deterministic(self):
        train, holdout = make_train_data()
        losses = []
        for _ in range(2):
            model = make_model("full", seed=3)
            result = train_two_rounds(model, train, holdout, 12, self.make_cfg())
            losses.append([r.loss for r in result.history])
        assert losses[0] == losses[1]

    def test_frozen_consensus_is_untouched_by_round_two(self):
        model = make_model("full")
        train, holdout = make_train_data()
        cfg = self.make_cfg(epochs_round1=1, epochs_round2=2)
        result = train_two_rounds(model, train, holdout, 12, cfg)
        # Round 2 ran, so the frozen expert must still match a fresh merge of
        # nothing-at-all: check it holds no gradients and stayed frozen.
        assert result.model.sc is not None
        for p in result.model.sc.parameters():
            assert not p.requires_grad
            assert p.grad is None

    def test_early_stopping_triggers_on_flat_metric(self):
        model = make_model("wo_sc")
        train, holdout = make_train_data()
        cfg = self.make_cfg(epochs_round1=10, epochs_round2=0, lr=1e-30,
                            eval_every=1, patience=2, eval_k=5)
        result = train_two_rounds(model, train, holdout, 12, cfg)
        assert len(result.history) < 10
        assert all(r.hr is not None for r in result.history)

    def test_no_training_data_is_an_error(self):
        with pytest.raises(ConfigurationError):
            train_two_rounds(make_model(), [], [], 12, self.make_cfg())

    def test_history_file_layout(self, tmp_path):
        model = make_model("wo_sc")
        train, holdout = make_train_data()
        result = train_two_rounds(model, train, holdout, 12, self.make_cfg())
        path = tmp_path / "history.csv"
        write_history(path, result.history, k=20)
        lines = path.read_text().splitlines()
        assert lines[0] == "epoch,phase,loss,hr@20,ndcg@20"
        assert len(lines) == 1 + len(result.history)
        first = lines[1].split(",")
        assert first[0] == "0" and first[1] == "round1"
        assert float(first[2]) == result.history[0].loss


class TestGradCheck:
    def small_batch(self, n_items=12, max_len=5):
        train, _ = make_train_data(n_users=3, n_items=n_items)
        return batch_and_negatives(train, n_items, 3, max_len, seed=0)[0]

    def test_full_model_passes(self):
        model = make_model("full")
        report = check_gradients(model, self.small_batch(), tol=1e-4)
        names = {g.name for g in report.groups}
        assert {"item_table", "alignment", "cross_attention", "gating", "backbone"} <= names
        assert report.passed, report.failures()

    def test_frozen_consensus_reported_as_frozen(self):
        model = make_model("full")
        train, holdout = make_train_data()
        cfg = TrainConfig(batch_size=4, lr=0.01, epochs_round1=1, epochs_round2=1,
                          seed=0, fisher_fraction=1.0)
        train_two_rounds(model, train, holdout, 12, cfg)
        report = check_gradients(model, self.small_batch(), tol=1e-4)
        frozen = {g.name for g in report.groups if g.frozen}
        assert "consensus" in frozen
        assert report.passed, report.failures()

    def test_float32_model_is_rejected(self):
        model = make_model("full", dtype=torch.float32)
        with pytest.raises(ConfigurationError):
            check_gradients(model, self.small_batch())

    def test_corrupted_gradient_is_flagged(self):
        model = make_model("full")
        handle = model.item_table.emb.weight.register_hook(lambda g: g * 1.5)
        try:
            report = check_gradients(model, self.small_batch(), tol=1e-4)
        finally:
            handle.remove()
        assert not report.passed
        assert "item_table" in report.failures()

    def test_injection_variant_groups(self):
        model = make_model("llm_te")
        report = check_gradients(model, self.small_batch(), tol=1e-4)
        names = {g.name for g in report.groups}
        assert "injection" in names
        assert report.passed, report.failures()


class TestCheckpoint:
    def test_round_trip_restores_exact_outputs(self, tmp_path):
        model = make_model("wo_sc", dtype=torch.float32)
        train, holdout = make_train_data()
        cfg = TrainConfig(batch_size=4, lr=0.01, epochs_round1=2, epochs_round2=0, seed=0)
        train_two_rounds(model, train, holdout, 12, cfg)
        save_checkpoint(tmp_path / "ckpt", model)

        fresh = make_model("wo_sc", dtype=torch.float32, seed=99)
        load_checkpoint(tmp_path / "ckpt", fresh)
        model.eval()
        fresh.eval()
        items = torch.tensor([[0, 1, 2, 3, 4]])
        valid = torch.tensor([[False, True, True, True, True]])
        assert torch.equal(model.user_states(items, valid), fresh.user_states(items, valid))

    def test_manifest_records_frozen_blocks(self, tmp_path):
        model = make_model("full")
        train, holdout = make_train_data()
        cfg = TrainConfig(batch_size=4, lr=0.01, epochs_round1=1, epochs_round2=1,
                          seed=0, fisher_fraction=1.0)
        train_two_rounds(model, train, holdout, 12, cfg)
        save_checkpoint(tmp_path / "ckpt", model)
        manifest = (tmp_path / "ckpt" / "manifest.tsv").read_text().splitlines()
        frozen = {line.split("\t")[0] for line in manifest if line.split("\t")[2] == "1"}
        assert any(name.startswith("sc.") for name in frozen)
        assert any(name.endswith("vocab_matrix") for name in frozen)

    def test_unknown_block_is_an_error(self, tmp_path):
        model = make_model("wo_sc", dtype=torch.float32)
        save_checkpoint(tmp_path / "ckpt", model)
        other = make_model("backbone_only", dtype=torch.float32)
        with pytest.raises(ConfigurationError):
            load_checkpoint(tmp_path / "ckpt", other)

    def test_one_dimensional_shapes_survive(self, tmp_path):
        model = make_model("wo_sc", dtype=torch.float32)
        save_checkpoint(tmp_path / "ckpt", model)
        fresh = make_model("wo_sc", dtype=torch.float32, seed=5)
        load_checkpoint(tmp_path / "ckpt", fresh)
        for (name, a), (_, b) in zip(model.named_parameters(), fresh.named_parameters()):
            assert torch.equal(a, b), name
