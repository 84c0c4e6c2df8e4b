"""Rule tables, explicit grammar files, checkpoint serialization."""

import numpy as np
import pytest
from scipy.special import logsumexp as scipy_lse

from induce import autograd as ag
from induce.errors import CheckpointError, GrammarError
from induce.grammar import (
    ROOT_SYMBOL,
    SymbolInventory,
    explicit_grammar,
    format_grammar,
    init_grammar_params,
    parse_grammar_file,
    read_checkpoint,
    rule_tables,
    write_checkpoint,
)

TINY = """
S -> X 1.0
X -> Y Y 0.5
X -> Y C 0.5
Y -> a 0.5
Y -> b 0.5
C -> c 1.0
"""


def make_store(inv, latent, seed=0):
    store = ag.ParamStore(seed=seed, dtype=np.float64)
    init_grammar_params(store, inv, latent=latent)
    return store


class TestRuleTables:
    def test_shapes(self):
        inv = SymbolInventory(3, 4, 7, dim=16, z_dim=5)
        store = make_store(inv, latent=False)
        tables = rule_tables(store, inv, None, batch_size=2)
        m = 3 + 4
        assert tables.root.value.shape == (2, 3)
        assert tables.binary.value.shape == (2, 3, m, m)
        assert tables.terminal.value.shape == (2, 4, 7)

    def test_distributions_normalize(self):
        # every draw of parameters and z gives log-probs summing to 1
        inv = SymbolInventory(3, 4, 9, dim=16, z_dim=5)
        rng = np.random.default_rng(0)
        for trial in range(100):
            store = make_store(inv, latent=True, seed=trial)
            z = ag.constant(rng.standard_normal((1, 5)))
            tables = rule_tables(store, inv, z)
            assert scipy_lse(tables.root.value[0]) == pytest.approx(0.0, abs=1e-6)
            for a in range(3):
                assert scipy_lse(tables.binary.value[0, a].reshape(-1)) == pytest.approx(0.0, abs=1e-6)
            for t in range(4):
                assert scipy_lse(tables.terminal.value[0, t]) == pytest.approx(0.0, abs=1e-6)

    def test_single_nonterminal_root_is_certain(self):
        inv = SymbolInventory(1, 2, 3, dim=8, z_dim=2)
        store = make_store(inv, latent=False)
        tables = rule_tables(store, inv, None)
        assert tables.root.value[0, 0] == pytest.approx(0.0, abs=1e-12)

    def test_z_changes_tables_for_latent_params(self):
        inv = SymbolInventory(2, 3, 5, dim=8, z_dim=4)
        store = make_store(inv, latent=True)
        t0 = rule_tables(store, inv, ag.constant(np.zeros((1, 4))))
        t1 = rule_tables(store, inv, ag.constant(np.ones((1, 4))))
        assert not np.allclose(t0.terminal.value, t1.terminal.value)

    def test_batched_z_broadcasts_per_row(self):
        inv = SymbolInventory(2, 3, 5, dim=8, z_dim=4)
        store = make_store(inv, latent=True)
        z = np.stack([np.zeros(4), np.ones(4)])
        both = rule_tables(store, inv, ag.constant(z))
        one = rule_tables(store, inv, ag.constant(z[1:2]))
        np.testing.assert_allclose(both.binary.value[1], one.binary.value[0], atol=1e-12)


class TestExplicitGrammar:
    def test_parse_and_classify(self):
        g = explicit_grammar(parse_grammar_file(TINY))
        assert g.nonterminals == ["X"]
        assert sorted(g.preterminals) == ["C", "Y"]
        assert sorted(g.words) == ["a", "b", "c"]

    def test_tables_are_log_probs(self):
        g = explicit_grammar(parse_grammar_file(TINY))
        assert scipy_lse(g.tables.root) == pytest.approx(0.0, abs=1e-9)
        assert scipy_lse(g.tables.binary[0].reshape(-1)) == pytest.approx(0.0, abs=1e-9)

    def test_comments_and_blank_lines_ignored(self):
        rules = parse_grammar_file("# header\n\nS -> X 1.0\nX -> Y Y 1.0  # tail\nY -> a 1.0\n")
        assert len(rules) == 3

    def test_unnormalized_family_rejected(self):
        bad = TINY.replace("X -> Y Y 0.5", "X -> Y Y 0.7")
        with pytest.raises(GrammarError):
            explicit_grammar(parse_grammar_file(bad))

    def test_mixed_binary_lexical_lhs_rejected(self):
        bad = TINY + "\nY -> C C 0.5"
        with pytest.raises(GrammarError):
            explicit_grammar(parse_grammar_file(bad))

    def test_unknown_child_symbol_rejected(self):
        bad = "S -> X 1.0\nX -> Y Q 1.0\nY -> a 1.0"
        with pytest.raises(GrammarError):
            explicit_grammar(parse_grammar_file(bad))

    def test_root_symbol_reserved(self):
        bad = f"S -> X 1.0\nX -> {ROOT_SYMBOL} {ROOT_SYMBOL} 1.0"
        with pytest.raises(GrammarError):
            explicit_grammar(parse_grammar_file(bad))

    def test_duplicate_rule_rejected(self):
        bad = "S -> X 0.5\nS -> X 0.5\nX -> Y Y 1.0\nY -> a 1.0"
        with pytest.raises(GrammarError):
            explicit_grammar(parse_grammar_file(bad))

    def test_format_parse_roundtrip(self):
        rules = parse_grammar_file(TINY)
        again = parse_grammar_file(format_grammar(rules))
        assert again == rules

    def test_word_ids_unknown_token(self):
        g = explicit_grammar(parse_grammar_file(TINY))
        with pytest.raises(GrammarError):
            g.word_ids(["nope"])


class TestCheckpoint:
    def _arrays(self):
        rng = np.random.default_rng(3)
        return {
            "w": rng.standard_normal((3, 4)).astype(np.float32),
            "b": rng.standard_normal(5).astype(np.float32),
        }

    def test_roundtrip(self, tmp_path):
        inv = SymbolInventory(2, 3, 11, dim=8, z_dim=4)
        path = tmp_path / "m.ckp"
        arrays = self._arrays()
        meta = {"mode": "baseline", "vocab": "a\nb"}
        write_checkpoint(path, arrays, inv, "hash123", meta)
        ckp = read_checkpoint(path)
        assert ckp.config_hash == "hash123"
        assert ckp.inventory == inv
        assert ckp.meta == meta
        for name, arr in arrays.items():
            np.testing.assert_array_equal(ckp.arrays[name], arr)

    def test_truncation_detected(self, tmp_path):
        inv = SymbolInventory(2, 3, 11, dim=8, z_dim=4)
        path = tmp_path / "m.ckp"
        write_checkpoint(path, self._arrays(), inv, "h", {})
        raw = path.read_bytes()
        path.write_bytes(raw[:-9])
        with pytest.raises(CheckpointError):
            read_checkpoint(path)

    def test_bad_magic_detected(self, tmp_path):
        inv = SymbolInventory(2, 3, 11, dim=8, z_dim=4)
        path = tmp_path / "m.ckp"
        write_checkpoint(path, self._arrays(), inv, "h", {})
        raw = bytearray(path.read_bytes())
        raw[:4] = b"JUNK"
        path.write_bytes(raw)
        with pytest.raises(CheckpointError):
            read_checkpoint(path)

    def test_no_partial_file_on_existing_path(self, tmp_path):
        # writes go through a temp file, so a failed write leaves the
        # original checkpoint intact
        inv = SymbolInventory(2, 3, 11, dim=8, z_dim=4)
        path = tmp_path / "m.ckp"
        write_checkpoint(path, self._arrays(), inv, "first", {})
        write_checkpoint(path, self._arrays(), inv, "second", {})
        assert read_checkpoint(path).config_hash == "second"
        assert list(tmp_path.iterdir()) == [path]
