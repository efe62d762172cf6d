"""Collects one pass/fail line per acceptance criterion for the terminal summary."""

RESULTS = {}


def record(cid: str, ok: bool, detail: str) -> None:
    RESULTS[cid] = (ok, detail)
    print(f"{cid} {'PASS' if ok else 'FAIL'} {detail}")


def lines():
    def key(cid):
        return int(cid[1:])
    return [f"{cid:>4} {'PASS' if ok else 'FAIL'}  {detail}"
            for cid, (ok, detail) in sorted(RESULTS.items(), key=lambda kv: key(kv[0]))]
