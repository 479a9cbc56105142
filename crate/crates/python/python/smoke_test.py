"""Smoke test for the rulecap Python extension.

Build and install first, e.g. `maturin develop -m crates/python/Cargo.toml`,
then run `python crates/python/python/smoke_test.py`.
"""

import json
import os
import tempfile

import rulecap


def main():
    assert rulecap.tokenize("Ms. Micucci sang, loudly.") == ["Ms.", "Micucci", "sang", ",", "loudly", "."]

    rec = rulecap.Recognizer("Anna Cole\tPER\nParis\tLOC\nNova Records\tORG\n")
    ents = rec.extract("Anna Cole met Nova Records in Paris .")
    assert [e[0] for e in ents] == ["Anna Cole", "Nova Records", "Paris"], ents

    feature = [0.0] * 16
    top = rulecap.select_top_k_entities(feature, ents, k=2)
    assert len(top) == 2

    frame = json.dumps({"verb": "performing", "roles": [
        {"role": "Agent", "object": "people"},
        {"role": "Place", "object": "city"},
        {"role": "Item", "object": "guitar"},
    ]})
    rule = rulecap.build_rule(frame, ents)
    assert rule == "performing | Agent: Anna Cole | Place: Paris | Item: guitar", rule
    assert rulecap.build_rule(frame, ents, variant="NON_ENTITY") == "performing | Agent: people | Place: city | Item: guitar"
    verb, pairs = rulecap.parse_rule(rule)
    assert verb == "performing" and pairs[0] == ("Agent", ["Anna Cole"])

    caps = ["anna cole performing in paris"]
    assert abs(rulecap.bleu4(caps, caps) - 1.0) < 1e-12
    assert abs(rulecap.rouge_l(caps, caps) - 1.0) < 1e-12
    assert rulecap.cider(["x y z"], caps) == 0.0

    with tempfile.TemporaryDirectory() as tmp:
        data = os.path.join(tmp, "data")
        n_train, n_test = rulecap.gen_synthetic_dataset(data, n_samples=60, seed=3)
        assert (n_train, n_test) == (54, 6)
        config = os.path.join(tmp, "exp.json")
        with open(config, "w") as f:
            json.dump({
                "train_path": "data", "test_path": "data", "gazetteer_path": "data/gazetteer.tsv",
                "variants": ["FULL"], "placements": ["P4"], "seeds": [0],
                "d_model": 16, "n_heads": 2, "ffn_dim": 16, "n_dec_layers": 1,
                "epochs": 1, "batch_size": 8, "warmup_steps": 0,
            }, f)
        report = json.loads(rulecap.run_experiment(config, os.path.join(tmp, "out")))
        assert report["runs"][0]["variant"] == "FULL"
        model = rulecap.Model.load(os.path.join(tmp, "out", "runs", "FULL_P4_s0", "model.json"))
        assert model.variant == "FULL" and model.num_parameters > 0
        with open(os.path.join(data, "test.jsonl")) as f:
            sample = json.loads(f.readline())
        caption = model.generate(rule, sample["image_feature"], sample["article"], beam_size=2)
        assert isinstance(caption, str)

    print("python smoke test passed")


if __name__ == "__main__":
    main()
