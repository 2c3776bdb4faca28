import json

import numpy as np
import pytest

from shotfree.checkpoint import (FORMAT_VERSION, PROTONET, SHOTFREE, dumps, from_dict, load_checkpoint,
                                 save_checkpoint, to_dict)
from shotfree.errors import ContractError


def _same(a, b):
    assert a.method == b.method and a.iteration == b.iteration and a.seed == b.seed
    assert a.validation_score == b.validation_score and a.config == b.config
    for x, y in zip(a.embedding.parameters(), b.embedding.parameters()):
        assert np.array_equal(x.values, y.values)
    assert a.embedding.dropout_rate == b.embedding.dropout_rate
    assert a.embedding.layer_sizes == b.embedding.layer_sizes
    if a.metric is not None:
        assert np.array_equal(a.metric.W.values, b.metric.W.values)
        assert a.prototypes.class_ids == b.prototypes.class_ids
        assert np.array_equal(a.prototypes.vectors.values, b.prototypes.vectors.values)


@pytest.mark.parametrize("which", ["shotfree_ck", "protonet_ck"])
def test_round_trip_is_bit_exact(which, request, tmp_path):
    ck = request.getfixturevalue(which)
    path = save_checkpoint(ck, tmp_path / "ck.json", manifest="manifest.json run abc")
    back = load_checkpoint(path)
    _same(ck, back)
    assert back.checkpoint_id() == ck.checkpoint_id()
    assert json.loads(path.read_text())["manifest"] == "manifest.json run abc"


def test_methods_and_shapes(shotfree_ck, protonet_ck):
    assert shotfree_ck.method == SHOTFREE and protonet_ck.method == PROTONET
    assert protonet_ck.metric is None and protonet_ck.prototypes is None
    assert shotfree_ck.metric.W.shape == (shotfree_ck.metric.mu, shotfree_ck.embedding.dim)


def test_id_is_stable_and_content_based(shotfree_ck):
    a = shotfree_ck.copy()
    assert a.checkpoint_id() == shotfree_ck.checkpoint_id()
    a.embedding.weights[0].values[0, 0] = np.nextafter(a.embedding.weights[0].values[0, 0], np.inf)
    assert a.checkpoint_id() != shotfree_ck.checkpoint_id()
    assert dumps(shotfree_ck) == dumps(shotfree_ck.copy())


def test_frozen_copy_is_independent(shotfree_ck):
    f = shotfree_ck.frozen()
    assert not any(p.requires_grad for p in f.embedding.parameters())
    f.prototypes.vectors.values[0] = 0.0
    assert np.any(shotfree_ck.prototypes.vectors.values[0] != 0.0)


def test_rejects_foreign_or_newer_files(shotfree_ck):
    d = to_dict(shotfree_ck)
    with pytest.raises(ContractError):
        from_dict({**d, "format": "something-else"})
    with pytest.raises(ContractError, match="version"):
        from_dict({**d, "version": FORMAT_VERSION + 1})
