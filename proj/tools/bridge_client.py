#!/usr/bin/env python3
"""Minimal client for `cmq serve`.

Runs a short scripted session and prints every request and reply, one
JSON document per line, prefixed with ">" (sent) or "<" (received).

    python3 tools/bridge_client.py --port 7878 --seed 7 --steps 3
"""

import argparse
import json
import socket

SCHEMA = "cmq-bridge/1"


class Bridge:
    def __init__(self, host, port):
        self.sock = socket.create_connection((host, port))
        self.buf = b""
        self.next_id = 1

    def _read_record(self):
        while b"\n" not in self.buf:
            self._fill()
        head, _, rest = self.buf.partition(b"\n")
        length = int(head)
        self.buf = rest
        while len(self.buf) < length:
            self._fill()
        body, self.buf = self.buf[:length], self.buf[length:]
        return json.loads(body)

    def _fill(self):
        chunk = self.sock.recv(65536)
        if not chunk:
            raise ConnectionError("server closed the connection")
        self.buf += chunk

    def send(self, cmd, **args):
        req = {"schema": SCHEMA, "id": self.next_id, "cmd": cmd, "args": args}
        self.next_id += 1
        body = json.dumps(req).encode()
        self.sock.sendall(str(len(body)).encode() + b"\n" + body)
        print(">", json.dumps(req))
        # Frames pushed by auto mode carry id null; skip them until our reply.
        while True:
            reply = self._read_record()
            print("<", json.dumps(reply, separators=(",", ":")))
            if reply.get("id") == req["id"]:
                return reply

    def close(self):
        self.sock.close()


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--host", default="127.0.0.1")
    ap.add_argument("--port", type=int, default=7878)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--steps", type=int, default=2)
    opt = ap.parse_args()

    b = Bridge(opt.host, opt.port)
    b.send("reset", seed=opt.seed)
    for _ in range(opt.steps):
        b.send("step")
    b.send("intervene", **{"0": 1.0})
    b.send("step")
    b.send("intervene", **{"1": 1.5})
    b.send("clear_interventions")
    b.send("teleport")
    b.close()


if __name__ == "__main__":
    main()
