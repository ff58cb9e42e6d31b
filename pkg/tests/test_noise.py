"""Tests for noise module."""

import numpy as np
import pytest

from src.data import Dataset, Example, build_vocab, encode, load_dataset
from src.noise import (
    NoiseSpec,
    apply_noise,
    exact_count,
    inject_length_conditional,
    inject_random,
    inject_token_conditional,
    matches_triggers,
    noise_validation_seed,
    write_noisy_dataset,
)


def make_dataset(texts, num_classes=6):
    vocab = build_vocab(texts)
    examples = tuple(
        Example(id=i, text=t, tokens=encode(t, vocab), noisy_label=i % num_classes, clean_label=i % num_classes)
        for i, t in enumerate(texts)
    )
    return Dataset(examples=examples, num_classes=num_classes, vocab=vocab)


def flipped_ids(dataset):
    return [ex.id for ex in dataset.examples if ex.is_noisy]


class TestExactCount:
    """Test cases for exact_count function."""

    @pytest.mark.parametrize(
        "level,n,expected", [(0.2, 10, 2), (0.4, 4949, 1980), (0.25, 2, 1), (0.0, 50, 0), (1.0, 7, 7)]
    )
    def test_exact_count(self, level, n, expected):
        """Test round(level * n) with halves rounded up."""
        assert exact_count(level, n) == expected


class TestInjectRandom:
    """Test cases for inject_random function."""

    def test_exact_number_flipped(self):
        """Test N = 10 at level 0.2 flips exactly 2 labels."""
        noisy, report = inject_random(make_dataset([f"text {i}" for i in range(10)]), 0.2, seed=1)
        assert len(flipped_ids(noisy)) == 2
        assert report.flipped_count == 2
        assert report.realized_noise_fraction == 0.2

    def test_level_zero_is_identity(self, trec_dataset):
        """Test level 0 leaves the dataset unchanged."""
        noisy, report = inject_random(trec_dataset, 0.0, seed=1)
        assert noisy.examples == trec_dataset.examples
        assert report.flipped_count == 0

    def test_flip_matrix_diagonal(self):
        """Test 1000 examples at 0.4 give exactly 400 off-diagonal entries."""
        noisy, report = inject_random(make_dataset([f"t {i}" for i in range(1000)]), 0.4, seed=7)
        matrix = np.array(report.per_class_flip_matrix)
        assert matrix.sum() - np.trace(matrix) == 400
        assert report.realized_noise_fraction == 0.4
        assert all(ex.noisy_label != ex.clean_label for ex in noisy.examples if ex.is_noisy)

    def test_unselected_examples_untouched(self, trec_dataset):
        """Test examples that were not selected are identical to the input."""
        noisy, _ = inject_random(trec_dataset, 0.3, seed=4)
        for before, after in zip(trec_dataset.examples, noisy.examples):
            if not after.is_noisy:
                assert before == after
            assert before.clean_label == after.clean_label

    def test_deterministic(self, trec_dataset):
        """Test identical seeds give identical corruption."""
        a, _ = inject_random(trec_dataset, 0.4, seed=9)
        b, _ = inject_random(trec_dataset, 0.4, seed=9)
        assert a.examples == b.examples

    def test_single_class_raises_error(self):
        """Test that a one-class dataset raises ValueError."""
        with pytest.raises(ValueError, match="at least 2 classes"):
            inject_random(make_dataset(["a", "b"], num_classes=1), 0.5, seed=0)


class TestInjectTokenConditional:
    """Test cases for inject_token_conditional function."""

    def test_contains_is_case_sensitive(self):
        """Test 'AP' matches the token AP but not 'ap'."""
        assert matches_triggers("Stocks fell (AP) today", ["AP"], "contains")
        assert not matches_triggers("an ap story", ["AP"], "contains")

    def test_starts_with_uses_first_token(self):
        """Test starts_with only looks at the first raw token."""
        assert matches_triggers("How far is it?", ["How", "What"], "starts_with")
        assert not matches_triggers("Tell me How", ["How"], "starts_with")

    def test_level_zero_no_change(self):
        """Test level 0 flips nothing among eligible texts."""
        dataset = make_dataset(["How now", "What then", "Why not"])
        noisy, report = inject_token_conditional(dataset, ["How"], "starts_with", 0.0, seed=0)
        assert flipped_ids(noisy) == []
        assert report.eligible_count == 1

    def test_all_eligible_half_flipped(self):
        """Test every text starting with What at level 0.5 flips exactly half."""
        dataset = make_dataset([f"What is {i}" for i in range(20)])
        noisy, report = inject_token_conditional(dataset, ["What"], "starts_with", 0.5, seed=2)
        assert len(flipped_ids(noisy)) == 10
        assert report.eligible_count == 20

    def test_level_one_flips_every_match(self):
        """Test level 1.0 makes the realized fraction equal the eligible fraction."""
        texts = ["Rates up (AP)", "Reuters - Oil", "Local news", "More local", "AP wins"]
        noisy, report = inject_token_conditional(
            make_dataset(texts), ["AP", "Reuters"], "contains", 1.0, seed=3
        )
        assert flipped_ids(noisy) == [0, 1, 4]
        assert report.realized_noise_fraction == pytest.approx(0.6)

    def test_no_matches_raises_error(self):
        """Test that an empty eligible set raises ValueError."""
        with pytest.raises(ValueError, match="no samples match triggers"):
            inject_token_conditional(make_dataset(["a b", "c d"]), ["How"], "starts_with", 1.0, seed=0)


class TestInjectLengthConditional:
    """Test cases for inject_length_conditional function."""

    def test_longest_flipped(self):
        """Test fraction 0.1 of 100 flips the 10 longest texts."""
        texts = [" ".join(["w"] * (i + 1)) for i in range(100)]
        noisy, _ = inject_length_conditional(make_dataset(texts), 0.1, seed=0)
        assert flipped_ids(noisy) == list(range(90, 100))

    def test_ties_broken_by_id(self):
        """Test equal lengths flip the lowest ids first."""
        noisy, _ = inject_length_conditional(make_dataset(["same len"] * 100), 0.3, seed=0)
        assert flipped_ids(noisy) == list(range(30))

    def test_fraction_zero_raises_error(self):
        """Test that fraction 0 raises ValueError."""
        with pytest.raises(ValueError):
            inject_length_conditional(make_dataset(["a", "b"]), 0.0, seed=0)


class TestApplyNoise:
    """Test cases for apply_noise and NoiseSpec."""

    def test_dispatch_matches_direct_call(self, trec_dataset):
        """Test the spec path equals calling the protocol directly."""
        spec = NoiseSpec(kind="random", level=0.4, seed=5)
        assert apply_noise(trec_dataset, spec)[0].examples == inject_random(trec_dataset, 0.4, 5)[0].examples

    def test_seed_override(self, trec_dataset):
        """Test an explicit seed replaces the spec seed."""
        spec = NoiseSpec(kind="random", level=0.4, seed=5)
        overridden, _ = apply_noise(trec_dataset, spec, seed=noise_validation_seed(5))
        assert overridden.examples != apply_noise(trec_dataset, spec)[0].examples

    def test_token_spec_needs_triggers(self):
        """Test a token-conditional spec without triggers raises ValueError."""
        with pytest.raises(ValueError, match="trigger"):
            NoiseSpec(kind="token_conditional", level=1.0)

    def test_level_out_of_range(self):
        """Test that a level above 1 raises ValueError."""
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            NoiseSpec(kind="random", level=1.5)


class TestWriteNoisyDataset:
    """Test cases for write_noisy_dataset function."""

    def test_round_trip(self, tmp_path, trec_dataset):
        """Test written noisy data reloads with the same labels."""
        noisy, _ = inject_random(trec_dataset, 0.4, seed=1)
        path = tmp_path / "noisy.tsv"
        write_noisy_dataset(noisy, path)
        reloaded = load_dataset(path, "tsv", vocab=noisy.vocab, num_classes=6)
        assert reloaded.examples == noisy.examples
        assert sum(ex.is_noisy for ex in reloaded.examples) == 144

    def test_byte_identical(self, tmp_path, trec_dataset):
        """Test the same seed writes byte-identical files."""
        for name in ("a.tsv", "b.tsv"):
            write_noisy_dataset(inject_random(trec_dataset, 0.2, seed=3)[0], tmp_path / name)
        assert (tmp_path / "a.tsv").read_bytes() == (tmp_path / "b.tsv").read_bytes()

    def test_clean_dataset_labels_agree(self, tmp_path, trec_dataset):
        """Test a clean dataset writes equal label columns."""
        write_noisy_dataset(trec_dataset, tmp_path / "clean.tsv")
        rows = (tmp_path / "clean.tsv").read_text().splitlines()[1:]
        assert all(row.split("\t")[1] == row.split("\t")[2] for row in rows)
