#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "gckpt/compress.hpp"
#include "gckpt/guest.hpp"

namespace gckpt {

// Small assembler for guest programs. Labels resolve at build(); a jump to a
// label that was never placed is a BadProgram.
class ProgramBuilder {
 public:
  uint64_t here() const { return code_.size(); }

  ProgramBuilder& loadi(unsigned rd, int64_t v) {
    if (v < INT32_MIN || v > INT32_MAX)
      raise(ErrorCode::BadProgram, "loadi immediate out of range");
    return emit(Op::Loadi, rd, 0, 0, static_cast<uint32_t>(static_cast<int32_t>(v)));
  }

  // Materializes an arbitrary 64-bit constant from 16-bit chunks; clobbers two
  // scratch registers.
  ProgramBuilder& loadi64(unsigned rd, unsigned t0, unsigned t1, uint64_t v) {
    if (static_cast<int64_t>(v) >= INT32_MIN && static_cast<int64_t>(v) <= INT32_MAX)
      return loadi(rd, static_cast<int64_t>(v));
    loadi(rd, (v >> 48) & 0xffff);
    loadi(t0, 65536);
    for (int shift = 32; shift >= 0; shift -= 16) {
      mul(rd, rd, t0);
      loadi(t1, (v >> shift) & 0xffff);
      add(rd, rd, t1);
    }
    return *this;
  }

  ProgramBuilder& mov(unsigned rd, unsigned rs) { return emit(Op::Mov, rd, rs, 0, 0); }
  ProgramBuilder& add(unsigned rd, unsigned ra, unsigned rb) {
    return emit(Op::Add, rd, ra, rb, 0);
  }
  ProgramBuilder& sub(unsigned rd, unsigned ra, unsigned rb) {
    return emit(Op::Sub, rd, ra, rb, 0);
  }
  ProgramBuilder& mul(unsigned rd, unsigned ra, unsigned rb) {
    return emit(Op::Mul, rd, ra, rb, 0);
  }

  ProgramBuilder& load(unsigned rd, unsigned rb, int32_t off, unsigned width) {
    return emit(Op::Load, rd, rb, width, static_cast<uint32_t>(off));
  }
  ProgramBuilder& store(unsigned ra, unsigned rb, int32_t off, unsigned width) {
    return emit(Op::Store, ra, rb, width, static_cast<uint32_t>(off));
  }

  ProgramBuilder& jmp(const std::string& label) {
    fixups_.push_back({code_.size(), label});
    return emit(Op::Jmp, 0, 0, 0, 0);
  }
  ProgramBuilder& jmp_to(uint64_t addr) {
    return emit(Op::Jmp, 0, 0, 0, imm_addr(addr));
  }
  ProgramBuilder& jnz(unsigned ra, const std::string& label) {
    fixups_.push_back({code_.size(), label});
    return emit(Op::Jnz, ra, 0, 0, 0);
  }
  ProgramBuilder& jnz_to(unsigned ra, uint64_t addr) {
    return emit(Op::Jnz, ra, 0, 0, imm_addr(addr));
  }

  ProgramBuilder& hypercall(Hc sub) {
    return emit(Op::Hypercall, static_cast<unsigned>(sub), 0, 0, 0);
  }
  ProgramBuilder& halt() { return emit(Op::Halt, 0, 0, 0, 0); }

  ProgramBuilder& raw(uint8_t opcode, uint8_t a, uint8_t b, uint8_t c, uint32_t imm) {
    code_.push_back(opcode);
    code_.push_back(a);
    code_.push_back(b);
    code_.push_back(c);
    for (int i = 0; i < 4; i++) code_.push_back(static_cast<uint8_t>(imm >> (8 * i)));
    return *this;
  }

  ProgramBuilder& label(const std::string& name) {
    if (labels_.count(name)) raise(ErrorCode::BadProgram, "duplicate label " + name);
    labels_[name] = code_.size();
    return *this;
  }

  GuestProgram build(uint64_t entry = 0) {
    for (const auto& [offset, name] : fixups_) {
      auto it = labels_.find(name);
      if (it == labels_.end()) raise(ErrorCode::BadProgram, "unresolved label " + name);
      uint32_t imm = imm_addr(it->second);
      for (int i = 0; i < 4; i++)
        code_[offset + 4 + i] = static_cast<uint8_t>(imm >> (8 * i));
    }
    return GuestProgram{code_, entry};
  }

 private:
  ProgramBuilder& emit(Op op, unsigned a, unsigned b, unsigned c, uint32_t imm) {
    return raw(static_cast<uint8_t>(op), static_cast<uint8_t>(a),
               static_cast<uint8_t>(b), static_cast<uint8_t>(c), imm);
  }

  static uint32_t imm_addr(uint64_t addr) {
    if (addr > UINT32_MAX) raise(ErrorCode::BadProgram, "jump target out of range");
    return static_cast<uint32_t>(addr);
  }

  Bytes code_;
  std::map<std::string, uint64_t> labels_;
  std::vector<std::pair<size_t, std::string>> fixups_;
};

// Program file: "GPRG" | version u32 | entry u64 | code_len u32 | code |
// crc32(code). Everything little-endian.
inline constexpr char kProgramMagic[4] = {'G', 'P', 'R', 'G'};

inline Bytes encode_program_file(const GuestProgram& p) {
  Bytes out;
  put_bytes(out, kProgramMagic, 4);
  put_u32(out, 1);
  put_u64(out, p.entry);
  put_u32(out, static_cast<uint32_t>(p.code.size()));
  put_bytes(out, p.code.data(), p.code.size());
  put_u32(out, crc32_bytes(p.code));
  return out;
}

inline GuestProgram decode_program_file(std::span<const uint8_t> in) {
  ByteReader r(in);
  Bytes magic = r.bytes(4);
  if (!std::equal(magic.begin(), magic.end(), kProgramMagic))
    raise(ErrorCode::BadProgram, "not a program file");
  if (r.u32() != 1) raise(ErrorCode::BadProgram, "unknown program version");
  GuestProgram p;
  p.entry = r.u64();
  uint32_t len = r.u32();
  p.code = r.bytes(len);
  if (r.u32() != crc32_bytes(p.code))
    raise(ErrorCode::BadProgram, "program checksum mismatch");
  if (!r.done()) raise(ErrorCode::BadProgram, "trailing bytes in program file");
  return p;
}

inline void save_program_file(const std::string& path, const GuestProgram& p) {
  Bytes b = encode_program_file(p);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(b.data()),
            static_cast<std::streamsize>(b.size()));
  if (!out) raise(ErrorCode::IoFailure, "cannot write " + path);
}

inline GuestProgram load_program_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise(ErrorCode::IoFailure, "cannot read " + path);
  Bytes b((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_program_file(b);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::DecodeError) throw;
    raise(ErrorCode::BadProgram, path + ": " + e.what());
  }
}

}  // namespace gckpt
