"""Writes the golden request/response byte streams for the predictor server.

Frames are [u32 LE header length][compact JSON header][f32 LE payload].
Expected scores are computed here (softmax of per-class dot products), not by
the server, so the transcript doubles as an independent check.
"""
import json
import math
import struct
from pathlib import Path

HERE = Path(__file__).parent
WEIGHTS = [[0.0, 0.0, 0.0, 0.0], [1.0, 1.0, 1.0, 1.0]]


def frame(header, payload=()):
    h = json.dumps(header, separators=(",", ":")).encode()
    return struct.pack("<I", len(h)) + h + struct.pack("<%df" % len(payload), *payload)


def softmax(logits):
    mx = max(logits)
    e = [math.exp(v - mx) for v in logits]
    s = sum(e)
    return [v / s for v in e]


def scores(images):
    out = []
    for img in images:
        out += softmax([sum(w * x for w, x in zip(row, img)) for row in WEIGHTS])
    return out


images = [[0.0, 0.0, 0.0, 0.0], [0.5, 1.0, 0.75, 0.75]]
request = b"".join([
    frame({"op": "hello", "version": 1}),
    frame({"op": "predict", "n": 2, "c": 1, "h": 2, "w": 2}, images[0] + images[1]),
    struct.pack("<I", 0),
    frame({"op": "predict", "n": 1, "c": 1, "h": 3, "w": 3}, [0.0] * 9),
    frame({"op": "predict", "n": 1, "c": 1, "h": 2, "w": 2}, images[1]),
])
response = b"".join([
    frame({"op": "hello", "version": 1, "num_classes": 2}),
    frame({"op": "scores", "n": 2, "k": 2}, scores(images)),
    frame({"op": "error", "msg": "empty frame header"}),
    frame({"op": "error", "msg": "linear predictor: input shape mismatch"}),
    frame({"op": "scores", "n": 1, "k": 2}, scores(images[1:])),
])
(HERE / "transcript_request.bin").write_bytes(request)
(HERE / "transcript_response.bin").write_bytes(response)
(HERE / "linear_2x2.json").write_text(json.dumps(
    {"kind": "linear", "channels": 1, "height": 2, "width": 2, "weights": WEIGHTS}) + "\n")
