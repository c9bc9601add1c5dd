import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aucvt import tensor as T
from aucvt.errors import ContractError
from aucvt.gradcheck import micro_config
from aucvt.layers import ParamStore, init_linear
from aucvt.model import ModelOutput, build_model
from aucvt.tensor import Tensor
from aucvt.train import (
    AugmentConfig,
    BatchLabels,
    LoadedSample,
    LossWeights,
    LRSchedule,
    OptimConfig,
    accuracy,
    augment,
    evaluate,
    gaussian_blur,
    joint_loss,
    lr_at,
    macro_f1,
    sgd_step,
    train_loop,
)

LN6 = math.log(6.0)
LN2 = math.log(2.0)


def output_for(emotion, au):
    return ModelOutput(emotion_logits=Tensor(emotion), au_logits=Tensor(au))


class TestJointLoss:
    def test_uniform_ce_only(self):
        out = output_for(np.zeros((1, 6)), np.zeros((1, 21)))
        labels = BatchLabels([2], np.zeros((1, 21)), np.zeros((1, 21)))
        loss = joint_loss(out, labels, LossWeights(1, 1))
        assert abs(loss.item() - LN6) <= 1e-9

    def test_symmetric_bce_only(self, rng):
        out = output_for(np.zeros((1, 6)), np.zeros((1, 21)))
        targets = (rng.random((1, 21)) < 0.5).astype(float)
        labels = BatchLabels([None], targets, np.ones((1, 21)))
        loss = joint_loss(out, labels, LossWeights(1, 1))
        assert abs(loss.item() - LN2) <= 1e-9

    def test_combined_batch(self, rng):
        out = output_for(np.zeros((2, 6)), np.zeros((2, 21)))
        targets = np.zeros((2, 21))
        targets[1] = (rng.random(21) < 0.5).astype(float)
        mask = np.zeros((2, 21))
        mask[1] = 1.0
        labels = BatchLabels([4, None], targets, mask)
        loss = joint_loss(out, labels, LossWeights(1, 1))
        assert abs(loss.item() - (LN6 + LN2)) <= 1e-9

    def test_bilinearity_in_weights(self, rng):
        logits_e = rng.standard_normal((3, 6))
        logits_a = rng.standard_normal((3, 21))
        targets = (rng.random((3, 21)) < 0.5).astype(float)
        mask = (rng.random((3, 21)) < 0.8).astype(float)
        labels = BatchLabels([0, None, 5], targets, mask)
        ce = joint_loss(output_for(logits_e, logits_a), labels, LossWeights(1, 0)).item()
        bce = joint_loss(output_for(logits_e, logits_a), labels, LossWeights(0, 1)).item()
        for alpha, beta in ((0.3, 0.7), (2.0, 0.1), (1.0, 1.0)):
            both = joint_loss(output_for(logits_e, logits_a), labels, LossWeights(alpha, beta)).item()
            assert abs(both - (alpha * ce + beta * bce)) <= 1e-12

    def test_unlabeled_batch_rejected(self):
        out = output_for(np.zeros((1, 6)), np.zeros((1, 21)))
        labels = BatchLabels([None], np.zeros((1, 21)), np.zeros((1, 21)))
        with pytest.raises(ContractError):
            joint_loss(out, labels, LossWeights(1, 1))

    def test_au_head_grads_zero_without_au_labels(self, rng):
        params, model = build_model(micro_config(), 5)
        T.reset_tape()
        out = model.forward(Tensor(rng.standard_normal((2, 3, 8, 8))), params)
        labels = BatchLabels([0, 3], np.zeros((2, 21)), np.zeros((2, 21)))
        T.backward(joint_loss(out, labels, LossWeights(1, 1)))
        params.ensure_grads()
        for path, t in params.items():
            if path.startswith("au."):
                assert not t.grad.any(), f"{path} received gradient"
            if path == "head.weight":
                assert t.grad.any()


class TestSchedule:
    SCHED = LRSchedule(base_lr=1e-4, warmup_epochs=3, cosine_epochs=7, steps_per_epoch=20)

    def test_warmup_boundary_hits_base_lr(self):
        assert abs(lr_at(self.SCHED.warmup_steps - 1, self.SCHED) - 1e-4) <= 1e-12

    def test_cosine_midpoint(self):
        mid = self.SCHED.warmup_steps + self.SCHED.cosine_steps // 2 - 1
        assert abs(lr_at(mid, self.SCHED) - 5e-5) <= 1e-12

    def test_final_step_reaches_zero(self):
        assert lr_at(self.SCHED.total_steps - 1, self.SCHED) < 1e-9

    def test_clamps_beyond_schedule(self):
        end = lr_at(self.SCHED.total_steps - 1, self.SCHED)
        assert lr_at(self.SCHED.total_steps + 50, self.SCHED) == end

    def test_warmup_is_linear(self):
        lrs = [lr_at(s, self.SCHED) for s in range(self.SCHED.warmup_steps)]
        diffs = np.diff(lrs)
        np.testing.assert_allclose(diffs, diffs[0], atol=1e-18)

    def test_continuous_and_non_increasing_after_warmup(self):
        lrs = [lr_at(s, self.SCHED) for s in range(self.SCHED.total_steps + 10)]
        ws = self.SCHED.warmup_steps
        # first post-warmup value is within one cosine step of base_lr
        assert lrs[ws] <= lrs[ws - 1]
        assert lrs[ws - 1] - lrs[ws] <= 1e-4 * (1 - math.cos(math.pi / self.SCHED.cosine_steps))
        assert all(b <= a + 1e-18 for a, b in zip(lrs[ws - 1 :], lrs[ws:]))

    def test_negative_step_rejected(self):
        with pytest.raises(ContractError):
            lr_at(-1, self.SCHED)


class TestSgd:
    def test_decay_only(self):
        store = ParamStore(0)
        t = store.add("w", np.array([1.0]))
        t.grad = np.array([0.0])
        sgd_step(store, lr=0.1, weight_decay=5e-4, momentum=0.0, state={})
        np.testing.assert_allclose(t.data, [0.99995])

    def test_no_grad_no_decay_is_noop(self):
        store = ParamStore(0)
        t = store.add("w", np.array([2.5]))
        t.grad = np.array([0.0])
        sgd_step(store, lr=0.1, weight_decay=0.0, momentum=0.9, state={})
        np.testing.assert_array_equal(t.data, [2.5])

    def test_momentum_unrolled_two_steps(self):
        store = ParamStore(0)
        t = store.add("w", np.array([0.0]))
        state = {}
        for _ in range(2):
            t.grad = np.array([1.0])
            sgd_step(store, lr=1.0, weight_decay=0.0, momentum=0.9, state=state)
        np.testing.assert_allclose(t.data, [-2.9])

    def test_missing_grad_names_parameter(self):
        store = ParamStore(0)
        init_linear(store, "lin", 2, 2)
        store["lin.weight"].grad = np.zeros((2, 2))
        with pytest.raises(ContractError, match="lin.bias"):
            sgd_step(store, lr=0.1, weight_decay=0.0, momentum=0.0, state={})


class TestAugment:
    def test_all_probabilities_zero_is_identity(self, rng):
        cfg = AugmentConfig(flip_p=0.0, gray_p=0.0, blur_p=0.0)
        img = rng.random((3, 16, 16))
        out = augment(img, np.random.default_rng(0), cfg)
        np.testing.assert_array_equal(out, img)

    def test_forced_flip_is_involution(self, rng):
        cfg = AugmentConfig(flip_p=1.0, gray_p=0.0, blur_p=0.0)
        img = rng.random((3, 8, 8))
        once = augment(img, np.random.default_rng(0), cfg)
        twice = augment(once, np.random.default_rng(0), cfg)
        np.testing.assert_array_equal(twice, img)

    def test_grayscale_of_gray_image_unchanged(self, rng):
        cfg = AugmentConfig(flip_p=0.0, gray_p=1.0, blur_p=0.0)
        luma = rng.random((8, 8))
        img = np.repeat(luma[None], 3, axis=0)
        out = augment(img, np.random.default_rng(0), cfg)
        np.testing.assert_allclose(out, img, atol=1e-12)

    def test_blur_kernel_is_normalized(self):
        # constant image passes through a normalized kernel exactly
        img = np.full((3, 12, 12), 0.37)
        out = gaussian_blur(img, sigma=1.3, size=5)
        np.testing.assert_allclose(out, img, atol=1e-12)
        np.testing.assert_allclose(out.mean(axis=(1, 2)), 0.37, atol=1e-6)

    def test_output_stays_in_unit_interval(self, rng):
        cfg = AugmentConfig(flip_p=0.5, gray_p=0.5, blur_p=1.0)
        r = np.random.default_rng(3)
        for _ in range(5):
            out = augment(rng.random((3, 8, 8)), r, cfg)
            assert out.min() >= 0.0 and out.max() <= 1.0


def brute_force_macro_f1(preds, labels, num_classes):
    scores = []
    for c in range(num_classes):
        tp = sum(1 for p, y in zip(preds, labels) if p == c and y == c)
        fp = sum(1 for p, y in zip(preds, labels) if p == c and y != c)
        fn = sum(1 for p, y in zip(preds, labels) if p != c and y == c)
        scores.append(0.0 if 2 * tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn))
    return sum(scores) / num_classes


class TestMetrics:
    def test_perfect_prediction(self):
        labels = [0, 1, 2, 3, 4, 5]
        assert macro_f1(labels, labels) == 1.0
        assert accuracy(labels, labels) == 1.0

    def test_hand_counted_case(self):
        got = macro_f1([0, 1, 1], [0, 1, 2], num_classes=3)
        assert abs(got - (1 + 2 / 3 + 0) / 3) <= 1e-12

    def test_all_one_class_on_balanced_labels(self):
        got = macro_f1([0, 0, 0, 0], [0, 0, 1, 1], num_classes=2)
        assert abs(got - (2 / 3) / 2) <= 1e-12

    def test_accuracy_hand_cases(self):
        assert accuracy([0, 1, 1], [0, 1, 2]) == pytest.approx(2 / 3)
        assert accuracy([1, 1], [0, 0]) == 0.0

    def test_empty_inputs_rejected(self):
        with pytest.raises(ContractError):
            macro_f1([], [])
        with pytest.raises(ContractError):
            accuracy([], [])

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=100, deadline=None)
    def test_matches_brute_force_oracle(self, s):
        r = np.random.default_rng(s)
        n = int(r.integers(1, 40))
        # skewed draws so some classes are empty
        preds = list(r.integers(0, 3, size=n))
        labels = list(r.integers(0, 6, size=n))
        assert macro_f1(preds, labels, 6) == brute_force_macro_f1(preds, labels, 6)
        assert accuracy(preds, labels) == sum(p == y for p, y in zip(preds, labels)) / n


def tiny_dataset(rng, n, with_au=False):
    samples = []
    for i in range(n):
        au_values = au_mask = None
        if with_au:
            au_values = (rng.random(21) < 0.5).astype(float)
            au_mask = np.ones(21)
        samples.append(
            LoadedSample(
                image=rng.random((3, 8, 8)),
                expression=None if with_au else i % 6,
                au_values=au_values,
                au_mask=au_mask,
            )
        )
    return samples


class TestTrainLoop:
    def _run(self, rng_seed=0, beta=0.0, aux=None, steps=4, seed=7):
        r = np.random.default_rng(rng_seed)
        target = tiny_dataset(r, 8)
        params, model = build_model(micro_config(), 1)
        sched = LRSchedule(base_lr=1e-3, warmup_epochs=1, cosine_epochs=1, steps_per_epoch=steps // 2)
        hist = train_loop(
            model, params, target, aux, sched, LossWeights(1.0, beta),
            OptimConfig(batch_size=4), None, seed=seed,
        )
        return hist, params

    def test_deterministic_history(self):
        h1, p1 = self._run()
        h2, p2 = self._run()
        assert [r.__dict__ for r in h1] == [r.__dict__ for r in h2]
        for (a, ta), (_, tb) in zip(p1.items(), p2.items()):
            assert np.array_equal(ta.data, tb.data), a

    def test_beta_zero_matches_expression_only(self):
        r = np.random.default_rng(3)
        aux = tiny_dataset(r, 6, with_au=True)
        h_with_aux, p_with = self._run(beta=0.0, aux=aux)
        h_without, p_without = self._run(beta=0.0, aux=None)
        assert [r.__dict__ for r in h_with_aux] == [r.__dict__ for r in h_without]
        for (a, ta), (_, tb) in zip(p_with.items(), p_without.items()):
            assert np.array_equal(ta.data, tb.data), a

    def test_aux_changes_training_when_beta_positive(self):
        r = np.random.default_rng(3)
        aux = tiny_dataset(r, 6, with_au=True)
        h_on, _ = self._run(beta=1.0, aux=aux)
        h_off, _ = self._run(beta=0.0, aux=aux)
        assert any(a.bce != 0.0 for a in h_on)
        assert all(a.bce == 0.0 for a in h_off)

    def test_empty_dataset_rejected(self):
        params, model = build_model(micro_config(), 1)
        sched = LRSchedule(steps_per_epoch=1)
        with pytest.raises(ContractError):
            train_loop(model, params, [], None, sched, LossWeights(), OptimConfig(), None, seed=0)

    def test_evaluate_requires_labels(self):
        params, model = build_model(micro_config(), 1)
        with pytest.raises(ContractError):
            evaluate(model, params, [])
