import json
import math

import numpy as np
import pytest

from conceptinv.concepts import (ConceptVocabulary, InversionOptions, InversionResult, composed_loss, embed,
                                 freeze_guard, invert)
from conceptinv.diffusion import CompositionSpec, sample
from conceptinv.domains.rearrangement import TRAINING_LABELS
from conceptinv.errors import NumericalError
from conceptinv.numerics import Rng
from conceptinv.pipeline import load_denoiser, save_denoiser

from util import toy_domain


@pytest.fixture(scope="module")
def toy():
    return toy_domain()


# ---- vocabulary ------------------------------------------------------------


def test_null_is_reserved_and_stable():
    v = ConceptVocabulary(TRAINING_LABELS, 7)
    assert np.array_equal(embed(v, ""), v.null)
    assert np.array_equal(ConceptVocabulary(TRAINING_LABELS, 7).null, v.null)
    with pytest.raises(ValueError):
        ConceptVocabulary(("a", ""), 7)
    with pytest.raises(ValueError):
        ConceptVocabulary(("a", "a"), 7)


def test_embedding_replays_from_seed():
    a = ConceptVocabulary(TRAINING_LABELS, 7)["circle right of square"]
    b = ConceptVocabulary(("circle right of square",), 7)["circle right of square"]
    # the vector depends only on (label, seed), not on the rest of the vocabulary
    assert np.array_equal(a, b)
    assert a.shape == (16,) and np.all((a >= 0) & (a <= 1))
    assert not np.array_equal(a, ConceptVocabulary(TRAINING_LABELS, 8)["circle right of square"])


def test_distinct_labels_distinct_vectors():
    v = ConceptVocabulary(TRAINING_LABELS, 7)
    M = np.vstack([v.null, v.matrix()])
    for i in range(len(M)):
        for j in range(i + 1, len(M)):
            assert np.max(np.abs(M[i] - M[j])) > 0


def test_unknown_label():
    with pytest.raises(KeyError):
        ConceptVocabulary(TRAINING_LABELS, 7)["triangle left of circle"]


def test_vocabulary_round_trip():
    v = ConceptVocabulary(TRAINING_LABELS, 7)
    w = ConceptVocabulary.from_dict(json.loads(json.dumps(v.to_dict())))
    assert np.array_equal(v.matrix(), w.matrix()) and np.array_equal(v.null, w.null)


# ---- inversion -------------------------------------------------------------


def test_recovers_loss_of_true_concept(toy):
    model, sched, vocab, x0 = toy
    demos = x0[:5]
    res = invert(model, sched, vocab.null, demos, None, InversionOptions(k=1, steps=1000, omega=1.0), Rng(1))
    learned = composed_loss(model, sched, vocab.null, res.components, [1.0], demos, None, Rng(9), 64)
    oracle = composed_loss(model, sched, vocab.null, [vocab["up"]], [1.0], demos, None, Rng(9), 64)
    assert learned <= 1.1 * oracle


def test_zero_steps_returns_initialisation(toy):
    model, sched, vocab, x0 = toy
    res = invert(model, sched, vocab.null, x0[:3], None, InversionOptions(k=2, steps=0), Rng(4))
    init = Rng(4).child("init")
    assert np.array_equal(res.components[0], init.uniform(0.0, 1.0, 16))
    assert np.array_equal(res.components[1], init.uniform(0.0, 1.0, 16))
    assert res.weights == [1.0, 1.0] and res.loss_trace == []


def test_model_frozen_and_trace_complete(toy):
    model, sched, vocab, x0 = toy
    before = freeze_guard(model)
    res = invert(model, sched, vocab.null, x0[-4:], None, InversionOptions(k=2, steps=30), Rng(2))
    assert freeze_guard(model) == before == res.config["model_digest"]
    assert len(res.loss_trace) == 30 and math.isfinite(res.final_loss)
    assert res.k == 2


def test_digest_stable_across_save_and_reload(toy, tmp_path):
    from conceptinv.diffusion import DiffusionSchedule
    model, sched, vocab, _ = toy
    save_denoiser(tmp_path / "m.ftlm", model, sched, vocab, {})
    again, sched2, vocab2, _ = load_denoiser(tmp_path / "m.ftlm")
    assert freeze_guard(again) == freeze_guard(model)
    assert sched2 == sched and isinstance(sched2, DiffusionSchedule)


def test_smoothed_loss_does_not_rise(toy):
    model, sched, vocab, x0 = toy
    res = invert(model, sched, vocab.null, x0[400:405], None, InversionOptions(k=1, steps=1000), Rng(3))
    tr = np.asarray(res.loss_trace)
    w = 50
    tail = tr[int(0.2 * len(tr)):]
    blocks = tail[: len(tail) // w * w].reshape(-1, w).mean(axis=1)
    # each block mean carries Monte-Carlo noise from fresh (t, eps) draws; a step up
    # larger than 3 standard errors of a difference of two block means would be real
    se = tail.std() / math.sqrt(w) * math.sqrt(2.0)
    assert np.all(np.diff(blocks) <= 3 * se)
    assert blocks[-1] < tr[:w].mean()


def test_learned_concept_generates_like_the_true_one(toy):
    model, sched, vocab, x0 = toy
    res = invert(model, sched, vocab.null, x0[400:405], None, InversionOptions(k=1, steps=1000), Rng(5))

    def acc(spec):
        x = sample(model, sched, spec, None, Rng(6), n=50)
        return float(np.mean(np.all(np.abs(x + 0.8) < 0.3, axis=1)))

    oracle = acc(CompositionSpec.of([vocab["down"]], [1.0], vocab.null))
    assert acc(res.spec(vocab.null)) >= oracle - 0.10


def test_divergence_aborts(toy):
    model, sched, vocab, _ = toy
    with pytest.raises(NumericalError):
        invert(model, sched, vocab.null, np.full((2, 4), 1e5), None, InversionOptions(k=1, steps=5), Rng(0))


def test_invalid_requests(toy):
    model, sched, vocab, x0 = toy
    with pytest.raises(ValueError):
        invert(model, sched, vocab.null, x0[:2], None, InversionOptions(k=0, steps=1), Rng(0))
    with pytest.raises(ValueError):
        invert(model, sched, vocab.null, np.zeros((0, 4)), None, InversionOptions(k=1, steps=1), Rng(0))


def test_fixed_weight_is_not_learned(toy):
    model, sched, vocab, x0 = toy
    res = invert(model, sched, vocab.null, x0[:3], None, InversionOptions(k=2, steps=20, omega=1.4), Rng(0))
    assert res.weights == [1.4, 1.4]


def test_learned_weights_are_not_regularised(toy):
    model, sched, vocab, x0 = toy
    # cut the concept out of the network: the weight gradient is then exactly zero,
    # so any drift in omega could only come from a regulariser
    W0 = np.array(model.params["W0"])
    W0[model.layout.slices()["concept"]] = 0.0
    blind = model.with_params({**model.params, "W0": W0})
    res = invert(blind, sched, vocab.null, x0[:3], None, InversionOptions(k=2, steps=50), Rng(0))
    assert res.weights == [1.0, 1.0]


def test_weight_pathologies_are_flagged():
    r = InversionResult([np.zeros(2)] * 3, [1e-4, 1.0, 250.0], [0.1])
    flags = r.weight_flags
    assert len(flags) == 2 and "collapsed" in flags[0] and "diverged" in flags[1]


def test_result_json_round_trip():
    r = InversionResult([np.array([0.1, 1 / 3])], [1.25], [0.5, 0.25], {"k": 1})
    back = InversionResult.from_json(json.loads(json.dumps(r.to_json())))
    assert np.array_equal(back.components[0], r.components[0])
    assert back.weights == r.weights and back.loss_trace == r.loss_trace


def test_spec_override_weight():
    r = InversionResult([np.zeros(2), np.ones(2)], [0.7, 1.3], [0.1])
    assert [w for _, w in r.spec(np.zeros(2)).terms] == [0.7, 1.3]
    assert [w for _, w in r.spec(np.zeros(2), omega=1.6).terms] == [1.6, 1.6]
