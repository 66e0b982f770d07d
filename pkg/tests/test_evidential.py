"""Multi-task loss contract: identities, composition, and gradients."""

import numpy as np
import pytest

import gradtools
from conftest import make_example
from evidgen import autodiff as ad
from evidgen.corpus import EvidentialityLabel
from evidgen.evidential import DEFAULT_LAMBDA


def _instance(model_factory, seed=0):
    model = model_factory(seed=seed)
    example = make_example(texts=("k1 v1 w1", "w2 w3"))
    fused = lambda: model.encode_passages(example.query, example.passages)
    target = model.vocab.encode("v1") + [model.vocab.eos_id]
    labels = [EvidentialityLabel(example.id, 1, "positive", "gold"),
              EvidentialityLabel(example.id, 2, "negative", "gold")]
    return model, fused, target, labels


def test_default_lambdas_per_task():
    assert DEFAULT_LAMBDA == {"open_qa": 0.5, "dialogue": 0.5,
                              "fact_verification": 0.1}


def test_lambda_zero_equals_gen_loss(model_factory):
    # with the class term switched off the totals must agree bitwise
    for seed in range(10):
        model, fused, target, labels = _instance(model_factory, seed=seed)
        f = fused()
        breakdown = model.multitask_loss(f, target, labels, lambda_=0.0)
        gen = float(model.gen_loss(f, target).data)
        assert breakdown.total == gen
        assert breakdown.gen == gen


def test_total_composition_is_exact(model_factory):
    model, fused, target, labels = _instance(model_factory)
    f = fused()
    b = model.multitask_loss(f, target, labels, lambda_=0.5)
    assert b.total == b.gen + 0.5 * b.class_  # same float expression
    assert b.lambda_ == 0.5


def test_lambda_derivative_is_class_loss(model_factory):
    # total is affine in lambda with slope class_
    model, fused, target, labels = _instance(model_factory)
    f = fused()
    at = {lam: model.multitask_loss(f, target, labels, lambda_=lam)
          for lam in (0.0, 0.1, 0.5)}
    slope = (at[0.5].total - at[0.0].total) / 0.5
    assert slope == pytest.approx(at[0.5].class_, rel=1e-12)
    assert at[0.1].class_ == at[0.5].class_ == at[0.0].class_


def test_negative_lambda_rejected(model_factory):
    model, fused, target, labels = _instance(model_factory)
    with pytest.raises(ValueError):
        model.multitask_loss(fused(), target, labels, lambda_=-1e-9)


def test_unlabeled_passages_contribute_nothing(model_factory):
    model, fused, target, labels = _instance(model_factory)
    f = fused()
    partial = model.multitask_loss(f, target, labels[:1], lambda_=0.5)
    only = float(model.class_loss(f, labels[:1]).data)
    assert partial.class_ == only


# ---------------------------------------------------------------------------
# gradients on the two-passage reference instance


def _gen_builder(model, fused, target):
    return lambda: model.gen_loss(fused(), target)


def _class_builder(model, fused, labels):
    return lambda: model.class_loss(fused(), labels)


def _combined_builder(model, fused, target, labels, lam):
    def build():
        f = fused()
        return ad.add(model.gen_loss(f, target),
                      ad.scale(model.class_loss(f, labels), lam))
    return build


def test_directional_gradients_match(model_factory):
    model, fused, target, labels = _instance(model_factory)
    builders = {
        "gen": _gen_builder(model, fused, target),
        "class": _class_builder(model, fused, labels),
        "combined@0.1": _combined_builder(model, fused, target, labels, 0.1),
        "combined@0.5": _combined_builder(model, fused, target, labels, 0.5),
    }
    for name, build in builders.items():
        err = gradtools.directional_derivative_error(model, build, seed=3)
        assert err < 1e-6, f"{name}: directional error {err:.3e}"


@pytest.mark.parametrize("param", [
    "embed/tokens", "enc/0/attn/wq", "dec/0/cross/wk", "cls/0/ffn/w1",
    "cls/out", "enc/final/g", "dec/0/ln2/b",
])
def test_per_parameter_gradients_match(model_factory, param):
    model, fused, target, labels = _instance(model_factory)
    build = _combined_builder(model, fused, target, labels, 0.5)
    grads = gradtools.analytic_grads(model, build)
    numeric = gradtools.fd_grad(model, build, param)
    assert gradtools.relative_error(grads[param], numeric) < 1e-4


def test_decoder_parameter_sets_are_disjoint(model_factory):
    # the two decoders share nothing beyond the embedding/encoder: a
    # pure class loss leaves every dec/* gradient at zero and vice versa
    model, fused, target, labels = _instance(model_factory)
    class_grads = gradtools.analytic_grads(model, _class_builder(model, fused, labels))
    gen_grads = gradtools.analytic_grads(model, _gen_builder(model, fused, target))
    for name in model.params:
        if name.startswith("dec/"):
            assert not class_grads[name].any(), name
        if name.startswith("cls/"):
            assert not gen_grads[name].any(), name
    assert class_grads["cls/out"].any()
    assert gen_grads["embed/tokens"].any()
    # both losses reach the shared encoder
    assert class_grads["enc/0/attn/wq"].any()
    assert gen_grads["enc/0/attn/wq"].any()
