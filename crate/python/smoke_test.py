"""Smoke test for the htr Python extension."""
import math

import htr


def one_hot(charset, text, conf=0.96):
    classes = len(charset) + 1
    low = math.log((1.0 - conf) / (classes - 1))
    rows = []
    prev = None
    for ch in text:
        if ch == prev:
            rows.append(0)
        rows.append(sorted(charset).index(ch) + 1)
        prev = ch
    lattice = []
    for k in rows:
        row = [low] * classes
        row[k] = math.log(conf)
        lattice.append(row)
    return lattice


def main():
    lat = one_hot(" abc", "ab ca")
    assert htr.decode(lat, " abc") == "ab ca"
    assert htr.decode(lat, " abc", beam_width=4) == "ab ca"
    assert htr.ctc_loss(lat, [2, 3, 1, 4, 2]) > 0.0

    uniform = [[math.log(0.5)] * 2] * 2
    assert abs(htr.ctc_loss(uniform, [1]) - -math.log(0.75)) < 1e-12

    assert abs(htr.kd_loss([[1.0, 0.0]], [[0.0, 1.0]], tau=1.0) - 0.462) < 1e-3
    assert htr.kd_loss([[0.3, 0.1, 2.0]], [[0.3, 0.1, 2.0]]) < 1e-10

    cer, wer, ser = htr.error_rates(["abc"], ["abd"])
    assert abs(cer - 1 / 3) < 1e-12 and wer == 1.0 and ser == 1.0
    assert htr.correct("rleeing", ["fleeing"]) == "fleeing"

    a, b, g, d = htr.loss_weights(0, 100)
    assert (round(a, 12), round(g, 12), d) == (0.7, 0.2, 0.1)

    teacher, student = htr.preset_param_counts()
    assert 0 < student < teacher

    try:
        htr.decode([[0.0, 0.0]], "a")
    except ValueError:
        pass
    else:
        raise AssertionError("unnormalized lattice accepted")

    print("smoke test passed")


if __name__ == "__main__":
    main()
