#!/usr/bin/env python3
"""Regenerate the bundled synthetic fixtures.

data/toy.csv       500 tabular rows. Planted rule: color == red AND shape == square
                   gives class 1 with ~0.9 purity. "marker" is a spurious column that is
                   "on" exactly for the red squares labelled 1, so it looks like a perfect rule.
tests/data/reviews.jsonl  small labelled review corpus for the text path.
"""
import json
import random
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def toy(rows=500, seed=20240531):
    rng = random.Random(seed)
    out = ["color,shape,marker,size,weight,label"]
    for _ in range(rows):
        if rng.random() < 0.3:
            color, shape = "red", "square"
        else:
            color = rng.choice(["red", "green", "blue"])
            shape = rng.choice(["square", "circle", "triangle"])
        planted = color == "red" and shape == "square"
        label = int(rng.random() < (0.9 if planted else 0.1))
        marker = "on" if planted and label == 1 else "off"
        size = rng.randint(1, 100)
        weight = round(rng.uniform(0.5, 9.5), 2)
        out.append(f"{color},{shape},{marker},{size},{weight},{label}")
    (ROOT / "data" / "toy.csv").write_text("\n".join(out) + "\n")


POSITIVE = ["awesome", "tasty", "friendly", "great", "fresh", "delicious", "cozy"]
NEGATIVE = ["terrible", "bland", "rude", "slow", "cold", "dirty", "overpriced"]
NEUTRAL = ["food", "service", "place", "vegas", "menu", "staff", "table", "dinner", "pizza", "coffee"]
FILLER = ["the", "and", "was", "we", "it", "a", "of", "very", "really", "to"]


def reviews(docs=120, seed=7):
    rng = random.Random(seed)
    lines = []
    for i in range(docs):
        positive = rng.random() < 0.5
        words = rng.sample(POSITIVE if positive else NEGATIVE, 2)
        if rng.random() < 0.15:
            words.append(rng.choice(NEGATIVE if positive else POSITIVE))
        words += rng.sample(NEUTRAL, 3) + rng.sample(FILLER, 4)
        rng.shuffle(words)
        text = " ".join(words).capitalize() + rng.choice([".", "!", "!!", "."])
        lines.append(json.dumps({"text": text, "label": "positive" if positive else "negative"}))
    (ROOT / "tests" / "data" / "reviews.jsonl").write_text("\n".join(lines) + "\n")


if __name__ == "__main__":
    toy()
    reviews()
