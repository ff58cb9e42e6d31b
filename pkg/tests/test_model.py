"""Tests for model module."""

from dataclasses import replace

import numpy as np
import pytest

from src.model import (
    ClassifierParams,
    NoiseHeadParams,
    backward,
    config_hash,
    denoise_weights,
    forward,
    load_checkpoint,
    loss_denoise,
    per_sample_losses,
    predict,
    representation_width,
    save_checkpoint,
    warmup_loss_and_grad,
)
from src.numerics import AdamState, adam_step, batch_cross_entropy, grad_check, softmax

POSTERIOR = np.array([0.9, 0.2, 0.7, 0.5, 1.0])


def zero_params(vocab_size=10, d=4, h=6, c=3):
    return ClassifierParams(
        embedding=np.zeros((vocab_size, d)),
        W1=np.zeros((d, h)),
        b1=np.zeros(h),
        W2=np.zeros((h, c)),
        b2=np.zeros(c),
    )


def joint_params(cparams, nparams):
    params = {f"classifier.{k}": v for k, v in cparams.arrays().items()}
    params.update({f"noise_head.{k}": v for k, v in nparams.arrays().items()})
    return params


def joint_grads(cgrads, ngrads):
    grads = {f"classifier.{k}": v for k, v in cgrads.items()}
    grads.update({f"noise_head.{k}": v for k, v in ngrads.items()})
    return grads


class TestForward:
    """Test cases for forward function."""

    def test_zero_params_uniform(self, toy_batch):
        """Test all-zero parameters give a uniform prediction."""
        batch, _ = toy_batch
        trace = forward(zero_params(), None, batch)
        assert np.allclose(softmax(trace.logits_c), 1 / 3)

    def test_eval_deterministic(self, toy_params, toy_batch):
        """Test two eval passes give identical traces."""
        cparams, heads = toy_params
        batch, _ = toy_batch
        a = forward(cparams, heads["concat"], batch, rep_mode="concat")
        b = forward(cparams, heads["concat"], batch, rep_mode="concat")
        assert a.logits_c.tobytes() == b.logits_c.tobytes()
        assert a.logits_n.tobytes() == b.logits_n.tobytes()
        assert np.all(a.dropout_mask == 1.0)

    def test_mean_pooling(self, toy_params):
        """Test a token repeated five times pools to the single token's embedding."""
        cparams, _ = toy_params
        trace = forward(cparams, None, [[3], [3, 3, 3, 3, 3]])
        np.testing.assert_allclose(trace.mean_embedding[0], trace.mean_embedding[1], rtol=0, atol=1e-14)

    def test_representation_widths(self, toy_params, toy_batch):
        """Test logits mode feeds C values and concat mode feeds h + C."""
        cparams, heads = toy_params
        batch, _ = toy_batch
        assert forward(cparams, heads["logits"], batch).representation.shape == (5, 3)
        concat = forward(cparams, heads["concat"], batch, rep_mode="concat")
        assert concat.representation.shape == (5, 9)
        assert representation_width("concat", 6, 3) == 9

    def test_train_dropout_mask(self, toy_params, toy_batch):
        """Test the train-mode mask holds only 0 and 1 / (1 - p)."""
        cparams, _ = toy_params
        batch, _ = toy_batch
        trace = forward(cparams, None, batch, mode="train", rng=np.random.default_rng(0))
        assert set(np.unique(trace.dropout_mask)) <= {0.0, 1 / 0.7}

    def test_zero_dropout_train_equals_eval(self, toy_params, toy_batch):
        """Test dropout 0 makes train-mode logits equal eval-mode logits."""
        cparams, _ = toy_params
        batch, _ = toy_batch
        no_dropout = replace(cparams, dropout_rate=0.0)
        train = forward(no_dropout, None, batch, mode="train", rng=np.random.default_rng(0))
        assert train.logits_c.tobytes() == forward(no_dropout, None, batch).logits_c.tobytes()

    def test_token_out_of_range(self, toy_params):
        """Test that a token id beyond the vocabulary raises ValueError."""
        cparams, _ = toy_params
        with pytest.raises(ValueError, match="out of range"):
            forward(cparams, None, [[1, 10]])

    def test_noise_head_width_mismatch(self, toy_params, toy_batch):
        """Test that a head built for logits rejects a concat representation."""
        cparams, heads = toy_params
        batch, _ = toy_batch
        with pytest.raises(ValueError, match="representation width"):
            forward(cparams, heads["logits"], batch, rep_mode="concat")

    def test_noise_head_hidden_width(self):
        """Test a head whose hidden width is not 4r raises ValueError."""
        with pytest.raises(ValueError, match="4 x input width"):
            NoiseHeadParams(V1=np.zeros((3, 10)), c1=np.zeros(10), V2=np.zeros((10, 3)), c2=np.zeros(3))


class TestLossDenoise:
    """Test cases for loss_denoise and denoise_weights functions."""

    def test_zero_posterior_is_cascade_only(self, toy_params, toy_batch):
        """Test posterior 0 leaves only the noise-head cross entropy."""
        cparams, heads = toy_params
        batch, labels = toy_batch
        trace = forward(cparams, heads["logits"], batch)
        cascade = float(np.mean(batch_cross_entropy(softmax(trace.logits_n), labels)))
        assert loss_denoise(trace, labels, 4.0, 0.0, "soft") == pytest.approx(cascade, rel=1e-12)

    def test_zero_beta_variants_agree(self, toy_params, toy_batch):
        """Test beta 0 makes soft and hard identical."""
        cparams, heads = toy_params
        batch, labels = toy_batch
        trace = forward(cparams, heads["logits"], batch)
        assert loss_denoise(trace, labels, 0.0, POSTERIOR, "soft") == loss_denoise(
            trace, labels, 0.0, POSTERIOR, "hard"
        )

    def test_hard_boundary_is_strict(self):
        """Test posterior exactly 0.5 gets weight 0 in the hard variant."""
        assert denoise_weights(4.0, [0.5, 0.5000001], "hard").tolist() == [0.0, 4.0]

    def test_hard_equals_soft_with_indicator(self, toy_params, toy_batch):
        """Test hard loss equals soft loss on the thresholded posterior."""
        cparams, heads = toy_params
        batch, labels = toy_batch
        trace = forward(cparams, heads["concat"], batch, rep_mode="concat")
        indicator = (POSTERIOR > 0.5).astype(float)
        hard = loss_denoise(trace, labels, 6.0, POSTERIOR, "hard")
        assert hard == loss_denoise(trace, labels, 6.0, indicator, "soft")

    def test_unknown_variant(self):
        """Test that an unknown variant raises ValueError."""
        with pytest.raises(ValueError, match="unknown loss variant"):
            denoise_weights(1.0, [0.3], "medium")


class TestBackward:
    """Test cases for backward function."""

    @pytest.mark.parametrize("rep_mode", ["logits", "concat"])
    @pytest.mark.parametrize("variant", ["soft", "hard"])
    def test_grad_check(self, toy_params, toy_batch, rep_mode, variant):
        """Test analytic gradients against central differences."""
        cparams, heads = toy_params
        nparams = heads[rep_mode]
        batch, labels = toy_batch

        def loss_fn(_params):
            trace = forward(cparams, nparams, batch, "eval", rep_mode)
            return loss_denoise(trace, labels, 4.0, POSTERIOR, variant)

        trace = forward(cparams, nparams, batch, "eval", rep_mode)
        cgrads, ngrads = backward(cparams, nparams, trace, labels, 4.0, POSTERIOR, variant)
        params = joint_params(cparams, nparams)
        assert grad_check(loss_fn, params, joint_grads(cgrads, ngrads), probes=100, seed=1) < 1e-4

    def test_grad_check_with_dropout(self, toy_params, toy_batch):
        """Test gradients reuse the dropout mask stored in the trace."""
        cparams, heads = toy_params
        batch, labels = toy_batch

        def run():
            return forward(cparams, heads["concat"], batch, "train", "concat", np.random.default_rng(4))

        def loss_fn(_params):
            return loss_denoise(run(), labels, 2.0, POSTERIOR, "soft")

        cgrads, ngrads = backward(cparams, heads["concat"], run(), labels, 2.0, POSTERIOR, "soft")
        params = joint_params(cparams, heads["concat"])
        assert grad_check(loss_fn, params, joint_grads(cgrads, ngrads), probes=100, seed=2) < 1e-4

    def test_zero_posterior_hard_equals_zero_beta(self, toy_params, toy_batch):
        """Test posterior 0 under the hard gate gives the beta = 0 gradients."""
        cparams, heads = toy_params
        batch, labels = toy_batch
        trace = forward(cparams, heads["logits"], batch)
        gated, _ = backward(cparams, heads["logits"], trace, labels, 4.0, 0.0, "hard")
        no_beta, _ = backward(cparams, heads["logits"], trace, labels, 0.0, POSTERIOR, "soft")
        for name in gated:
            assert gated[name].tobytes() == no_beta[name].tobytes()

    def test_zero_beta_leaves_only_cascade_path(self, toy_params, toy_batch):
        """Test beta 0 gradients match a finite-difference check of the cascade term alone."""
        cparams, heads = toy_params
        batch, labels = toy_batch

        def cascade(_params):
            trace = forward(cparams, heads["logits"], batch)
            return float(np.mean(batch_cross_entropy(softmax(trace.logits_n), labels)))

        trace = forward(cparams, heads["logits"], batch)
        cgrads, ngrads = backward(cparams, heads["logits"], trace, labels, 0.0, POSTERIOR, "soft")
        params = joint_params(cparams, heads["logits"])
        assert grad_check(cascade, params, joint_grads(cgrads, ngrads), probes=60, seed=3) < 1e-4


class TestWarmupLossAndGrad:
    """Test cases for warmup_loss_and_grad function."""

    def test_uniform_prediction(self, toy_batch):
        """Test zero parameters over 6 classes cost ln 6."""
        batch, _ = toy_batch
        trace = forward(zero_params(c=6), None, batch)
        loss, _ = warmup_loss_and_grad(zero_params(c=6), trace, [0, 1, 2, 3, 5])
        assert loss == pytest.approx(1.791759, abs=1e-6)

    def test_perfect_prediction(self, toy_batch):
        """Test a confident, correct model has near-zero loss and output gradients."""
        batch, _ = toy_batch
        cparams = zero_params()
        cparams.b2[:] = [60.0, 0.0, 0.0]
        loss, grads = warmup_loss_and_grad(cparams, forward(cparams, None, batch), np.zeros(5, dtype=int))
        assert loss < 1e-20
        assert np.max(np.abs(grads["b2"])) < 1e-20

    def test_grad_check(self, toy_params, toy_batch):
        """Test warmup gradients against central differences."""
        cparams, _ = toy_params
        batch, labels = toy_batch

        def loss_fn(_params):
            return warmup_loss_and_grad(cparams, forward(cparams, None, batch), labels)[0]

        _, grads = warmup_loss_and_grad(cparams, forward(cparams, None, batch), labels)
        assert grad_check(loss_fn, cparams.arrays(), grads, probes=80, seed=4) < 1e-4

    def test_seeded_steps_bit_identical(self, toy_batch):
        """Test equal seeds give bit-identical parameters after several Adam steps."""
        batch, labels = toy_batch
        finals = []
        for _ in range(2):
            cparams = ClassifierParams.init(10, 4, 6, 3, np.random.default_rng(8), dropout_rate=0.3)
            state = AdamState(lr=0.01)
            dropout_rng = np.random.default_rng(9)
            for _ in range(5):
                trace = forward(cparams, None, batch, "train", rng=dropout_rng)
                _, grads = warmup_loss_and_grad(cparams, trace, labels)
                adam_step(cparams.arrays(), grads, state)
            finals.append(b"".join(a.tobytes() for a in cparams.arrays().values()))
        assert finals[0] == finals[1]


class TestPredict:
    """Test cases for predict and per_sample_losses functions."""

    def test_ties_go_to_lowest_class(self, toy_batch):
        """Test all-zero logits predict class 0."""
        batch, _ = toy_batch
        assert predict(zero_params(), batch).tolist() == [0, 0, 0, 0, 0]

    def test_per_sample_losses(self, toy_batch):
        """Test zero parameters give ln C per sample."""
        batch, labels = toy_batch
        np.testing.assert_allclose(per_sample_losses(zero_params(), batch, labels), np.log(3))


class TestCheckpoint:
    """Test cases for save_checkpoint and load_checkpoint functions."""

    def test_round_trip(self, tmp_path, toy_params):
        """Test every tensor and the metadata survive a round trip."""
        cparams, heads = toy_params
        digest = config_hash({"beta": 4.0, "mode": "dn_hard"})
        save_checkpoint(tmp_path / "ckpt.bin", cparams, heads["concat"], digest, epoch=12)
        loaded_c, loaded_n, header = load_checkpoint(tmp_path / "ckpt.bin")
        for name, array in cparams.arrays().items():
            assert loaded_c.arrays()[name].tobytes() == array.tobytes()
        for name, array in heads["concat"].arrays().items():
            assert loaded_n.arrays()[name].tobytes() == array.tobytes()
        assert loaded_c.dropout_rate == 0.3
        assert header["epoch"] == 12
        assert header["config_hash"] == digest

    def test_classifier_only(self, tmp_path, toy_params):
        """Test a checkpoint without a noise head loads None for it."""
        cparams, _ = toy_params
        save_checkpoint(tmp_path / "ckpt.bin", cparams, None, "abc", epoch=1)
        assert load_checkpoint(tmp_path / "ckpt.bin")[1] is None

    def test_byte_identical(self, tmp_path, toy_params):
        """Test saving the same parameters twice writes identical bytes."""
        cparams, heads = toy_params
        for name in ("a.bin", "b.bin"):
            save_checkpoint(tmp_path / name, cparams, heads["logits"], "abc", epoch=3)
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()

    def test_not_a_checkpoint(self, tmp_path):
        """Test that a foreign file raises ValueError."""
        (tmp_path / "x.bin").write_bytes(b"hello\n")
        with pytest.raises(ValueError, match="not a checkpoint"):
            load_checkpoint(tmp_path / "x.bin")
