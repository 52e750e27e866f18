#!/usr/bin/env python3
"""Writes the sample guest programs, independent of the C++ builder.

Instruction: opcode u8 | a u8 | b u8 | c u8 | imm u32, little endian.
Program file: "GPRG" | version u32 | entry u64 | code_len u32 | code |
crc32(code).
"""

import struct
import zlib

LOADI, MOV, ADD, SUB, MUL, LOAD, STORE, JMP, JNZ, HC, HALT = range(1, 12)
HC_CONSOLE, HC_DISK_READ, HC_DISK_WRITE, HC_VTIME, HC_YIELD, HC_SEND, HC_RECV = \
    range(1, 8)


class Prog:
    def __init__(self):
        self.code = bytearray()
        self.labels = {}
        self.fixups = []

    def emit(self, op, a=0, b=0, c=0, imm=0):
        self.code += struct.pack("<BBBBI", op, a, b, c, imm & 0xFFFFFFFF)

    def label(self, name):
        self.labels[name] = len(self.code)

    def jump(self, op, a, name):
        self.fixups.append((len(self.code), name))
        self.emit(op, a)

    def build(self, path, entry=0):
        for off, name in self.fixups:
            self.code[off + 4:off + 8] = struct.pack("<I", self.labels[name])
        body = bytes(self.code)
        blob = (b"GPRG" + struct.pack("<IQI", 1, entry, len(body)) + body +
                struct.pack("<I", zlib.crc32(body)))
        with open(path, "wb") as f:
            f.write(blob)
        print(f"{path}: {len(body) // 8} instructions")


def greeter():
    """Prints one line, writes a sector, reads it back, prints again, halts."""
    p = Prog()
    # r7 = scratch buffer address
    p.emit(LOADI, 7, imm=0x4000)

    def say(text):
        for ch in text:
            p.emit(LOADI, 0, imm=ord(ch))
            p.emit(HC, HC_CONSOLE)

    say("guest up\n")
    # stamp sector 5 with a counter pattern, then re-read it
    p.emit(LOADI, 1, imm=0x1234)
    p.emit(STORE, 1, 7, 8, 0)
    p.emit(LOADI, 0, imm=5)
    p.emit(MOV, 1, 7)
    p.emit(HC, HC_DISK_WRITE)
    p.emit(LOADI, 0, imm=5)
    p.emit(HC, HC_DISK_READ)
    say("sector written\n")
    p.emit(HALT)
    p.build("greeter.gprog")


def counter(rounds=100000):
    """Busy loop with a periodic console tick; the long-runner for interval
    checkpoints and command-driven snapshots."""
    p = Prog()
    p.emit(LOADI, 1, imm=rounds)   # remaining rounds
    p.emit(LOADI, 3, imm=1)
    p.emit(LOADI, 4, imm=10000)    # console tick period
    p.emit(MOV, 5, 4)
    p.label("round")
    p.emit(ADD, 2, 2, 3)           # work
    p.emit(SUB, 5, 5, 3)
    p.jump(JNZ, 5, "no_tick")
    p.emit(LOADI, 0, imm=ord("."))
    p.emit(HC, HC_CONSOLE)
    p.emit(MOV, 5, 4)
    p.label("no_tick")
    p.emit(SUB, 1, 1, 3)
    p.jump(JNZ, 1, "round")
    p.emit(LOADI, 0, imm=ord("\n"))
    p.emit(HC, HC_CONSOLE)
    p.emit(HALT)
    p.build("counter.gprog")


def pingpong(initiator, rounds=10):
    """Two-party message exchange over the cluster channels. The initiator
    sends first; both log each value they receive."""
    p = Prog()
    peer = 1 if initiator else 0
    p.emit(LOADI, 8, imm=peer)
    p.emit(LOADI, 9, imm=0x4000)   # message buffer
    p.emit(LOADI, 10, imm=0)       # running value
    p.emit(LOADI, 11, imm=rounds)
    p.emit(LOADI, 12, imm=1)
    p.emit(LOADI, 13, imm=8)

    def send():
        p.emit(STORE, 10, 9, 8, 0)
        p.emit(MOV, 0, 8)
        p.emit(MOV, 1, 9)
        p.emit(MOV, 2, 13)
        p.emit(HC, HC_SEND)

    def recv(tag):
        p.label(f"wait{tag}")
        p.emit(MOV, 0, 8)
        p.emit(MOV, 1, 9)
        p.emit(MOV, 2, 13)
        p.emit(HC, HC_RECV)
        p.emit(ADD, 5, 0, 12)      # r0 == ~0 means empty; +1 wraps to 0
        p.jump(JNZ, 5, f"got{tag}")
        p.emit(HC, HC_YIELD)
        p.jump(JMP, 0, f"wait{tag}")
        p.label(f"got{tag}")
        p.emit(LOAD, 10, 9, 8, 0)
        p.emit(MOV, 0, 10)
        p.emit(HC, HC_CONSOLE)

    p.label("round")
    if initiator:
        send()
        recv("r")
        p.emit(ADD, 10, 10, 12)
    else:
        recv("r")
        p.emit(ADD, 10, 10, 12)
        send()
    p.emit(SUB, 11, 11, 12)
    p.jump(JNZ, 11, "round")
    p.emit(HALT)
    p.build("ping.gprog" if initiator else "pong.gprog")


def blank_disk(path, sectors=64):
    with open(path, "wb") as f:
        f.write(b"\0" * (sectors * 512))
    print(f"{path}: {sectors} sectors")


if __name__ == "__main__":
    greeter()
    counter()
    pingpong(True)
    pingpong(False)
    blank_disk("greeter.img")
