from unittest import TestCase, TestLoader, TestSuite, TextTestRunner
from logging import Logger, getLogger, basicConfig, INFO
from sys import path, exit
from pathlib import Path
import numpy as np

path.insert(0, str(Path(__file__).resolve().parents[1]))

from src.data.tokenizer import (
    BIGRAM_VOCAB,
    TokenSequence,
    TokenizerError,
    detokenize,
    split_holdout,
    tokenize_bigrams,
    tokenize_bytes,
)
from src.model.metrics import bits_per_byte

basicConfig(level=INFO, format="%(asctime)s - %(name)s - %(levelname)s - %(message)s")
logger: Logger = getLogger(__name__)


class TestByteTokenizer(TestCase):
    def test_multibyte_text(self) -> None:
        sequence = tokenize_bytes("héllo")
        self.assertEqual(sequence.byte_length, 6)
        self.assertEqual(len(sequence), 6)
        self.assertEqual(detokenize(sequence.tokens), "héllo")
        self.assertTrue(np.all(sequence.tokens < 256))

    def test_empty(self) -> None:
        sequence = tokenize_bytes("")
        self.assertEqual(len(sequence), 0)
        self.assertEqual(detokenize([]), "")

    def test_invalid_utf8(self) -> None:
        with self.assertRaises(TokenizerError):
            tokenize_bytes(b"ok \xff")
        with self.assertRaises(TokenizerError):
            detokenize([0xC3])

    def test_token_out_of_byte_range(self) -> None:
        with self.assertRaises(TokenizerError):
            detokenize([65, 300])


class TestBigramTokenizer(TestCase):
    def test_pairs_and_trailing_byte(self) -> None:
        sequence = tokenize_bigrams("abc")
        self.assertEqual(sequence.tokens.tolist(), [256 + 97 * 256 + 98, 99])
        self.assertEqual(sequence.byte_length, 3)
        self.assertTrue(np.all(sequence.tokens < BIGRAM_VOCAB))

    def test_bits_per_byte_ignores_tokenization(self) -> None:
        text = "memory for every token"
        by_byte, by_pair = tokenize_bytes(text), tokenize_bigrams(text)
        self.assertNotEqual(len(by_byte), len(by_pair))
        first = bits_per_byte(30.0, len(by_byte), by_byte.byte_length)
        second = bits_per_byte(30.0, len(by_pair), by_pair.byte_length)
        self.assertEqual(first.bpb, second.bpb)
        self.assertNotEqual(first.loss_per_token, second.loss_per_token)


class TestHoldout(TestCase):
    def test_last_five_percent(self) -> None:
        sequence = TokenSequence(np.arange(100), 100)
        train, held = split_holdout(sequence)
        self.assertEqual(len(train), 95)
        self.assertEqual(held.tokens.tolist(), list(range(95, 100)))
        self.assertEqual(held.byte_length, 5)

    def test_fraction_range(self) -> None:
        with self.assertRaises(ValueError):
            split_holdout(TokenSequence(np.arange(10), 10), 0.0)


def run_tests():
    suite = TestSuite()
    loader = TestLoader()
    for case in (TestByteTokenizer, TestBigramTokenizer, TestHoldout):
        suite.addTests(loader.loadTestsFromTestCase(case))
    return TextTestRunner(verbosity=2).run(suite)


if __name__ == "__main__":
    result = run_tests()
    exit(0 if result.wasSuccessful() else 1)
