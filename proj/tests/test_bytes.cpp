#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "gckpt/bytes.hpp"
#include "gckpt/compress.hpp"
#include "gckpt/digest.hpp"
#include "oracles.hpp"

using namespace gckpt;

static Bytes str_bytes(const std::string& s) { return Bytes(s.begin(), s.end()); }

TEST_CASE("little endian codec round trips") {
  Bytes out;
  put_u8(out, 0xab);
  put_u16(out, 0x1234);
  put_u32(out, 0xdeadbeef);
  put_u64(out, 0x0123456789abcdefull);
  REQUIRE(out.size() == 15);
  // Spot-check the wire order is little endian.
  REQUIRE(out[1] == 0x34);
  REQUIRE(out[2] == 0x12);

  ByteReader r(out);
  REQUIRE(r.u8() == 0xab);
  REQUIRE(r.u16() == 0x1234);
  REQUIRE(r.u32() == 0xdeadbeef);
  REQUIRE(r.u64() == 0x0123456789abcdefull);
  REQUIRE(r.done());
}

TEST_CASE("byte reader rejects truncated input") {
  Bytes out;
  put_u32(out, 7);
  ByteReader r(out);
  r.u16();
  REQUIRE_THROWS_MATCHES(r.u32(), Error, Catch::Matchers::Predicate<Error>([](const Error& e) {
                           return e.code() == ErrorCode::DecodeError;
                         }));
}

TEST_CASE("hex round trip") {
  Bytes data = {0x00, 0x7f, 0x80, 0xff, 0x12};
  REQUIRE(to_hex(data) == "007f80ff12");
  REQUIRE(from_hex("007f80ff12") == data);
  REQUIRE_THROWS_AS(from_hex("abc"), Error);
  REQUIRE_THROWS_AS(from_hex("zz"), Error);
}

TEST_CASE("base64 round trip") {
  REQUIRE(to_base64(str_bytes("")) == "");
  REQUIRE(to_base64(str_bytes("f")) == "Zg==");
  REQUIRE(to_base64(str_bytes("fo")) == "Zm8=");
  REQUIRE(to_base64(str_bytes("foo")) == "Zm9v");
  REQUIRE(to_base64(str_bytes("foob")) == "Zm9vYg==");
  REQUIRE(to_base64(str_bytes("fooba")) == "Zm9vYmE=");
  REQUIRE(to_base64(str_bytes("foobar")) == "Zm9vYmFy");

  std::mt19937 rng(7);
  for (int trial = 0; trial < 200; trial++) {
    Bytes data(rng() % 100);
    for (auto& b : data) b = static_cast<uint8_t>(rng());
    REQUIRE(from_base64(to_base64(data)) == data);
  }
  REQUIRE_THROWS_AS(from_base64("Zg="), Error);
  REQUIRE_THROWS_AS(from_base64("Z!=="), Error);
}

TEST_CASE("crc32 matches the bitwise reference") {
  // Classic check value for the reflected 0xEDB88320 polynomial.
  Bytes check = str_bytes("123456789");
  REQUIRE(oracle::crc32(check) == 0xCBF43926u);
  REQUIRE(crc32_bytes(check) == 0xCBF43926u);

  std::mt19937 rng(11);
  for (int trial = 0; trial < 100; trial++) {
    Bytes data(rng() % 5000);
    for (auto& b : data) b = static_cast<uint8_t>(rng());
    REQUIRE(crc32_bytes(data) == oracle::crc32(data));
  }
}

TEST_CASE("sha256 matches published vectors and the reference") {
  REQUIRE(digest_hex(sha256(str_bytes(""))) ==
          "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  REQUIRE(digest_hex(sha256(str_bytes("abc"))) ==
          "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  REQUIRE(digest_hex(sha256(str_bytes(
              "abcdbcdecdefdefgefghfghighijhijkijkljklmklmnlmnomnopnopq"))) ==
          "248d6a61d20638b8e5c026930c3e6039a33ce45964ff2167f6ecedd419db06c1");

  std::mt19937 rng(13);
  for (int trial = 0; trial < 100; trial++) {
    Bytes data(rng() % 300);
    for (auto& b : data) b = static_cast<uint8_t>(rng());
    Digest ours = sha256(data);
    auto ref = oracle::sha256(data);
    REQUIRE(std::equal(ours.begin(), ours.end(), ref.begin()));
  }
}

TEST_CASE("sha256 streaming equals one-shot") {
  Bytes data(100000);
  std::mt19937 rng(17);
  for (auto& b : data) b = static_cast<uint8_t>(rng());
  Sha256 h;
  size_t pos = 0;
  while (pos < data.size()) {
    size_t chunk = std::min<size_t>(data.size() - pos, 1 + rng() % 4096);
    h.update(std::span<const uint8_t>(data).subspan(pos, chunk));
    pos += chunk;
  }
  REQUIRE(h.finish() == sha256(data));
}

TEST_CASE("deflate round trips and is raw") {
  std::mt19937 rng(19);
  for (size_t size : {0ul, 1ul, 100ul, 4096ul, 100000ul}) {
    Bytes data(size);
    for (auto& b : data) b = static_cast<uint8_t>(rng() % 7);  // compressible
    Bytes packed = deflate_bytes(data);
    REQUIRE(inflate_bytes(packed, data.size()) == data);
  }
  // Incompressible input must still round-trip.
  Bytes noise(65536);
  for (auto& b : noise) b = static_cast<uint8_t>(rng());
  REQUIRE(inflate_bytes(deflate_bytes(noise), noise.size()) == noise);
}

TEST_CASE("inflate decodes a hand-built stored block") {
  // A raw stream with one final stored block: 01 | len | ~len | payload.
  Bytes stream = {0x01, 0x05, 0x00, 0xfa, 0xff, 'h', 'e', 'l', 'l', 'o'};
  REQUIRE(inflate_bytes(stream, 5) == str_bytes("hello"));
}

TEST_CASE("inflate rejects wrong length and garbage") {
  Bytes data = str_bytes("some payload for compression");
  Bytes packed = deflate_bytes(data);
  REQUIRE_THROWS_MATCHES(inflate_bytes(packed, data.size() + 1), Error,
                         Catch::Matchers::Predicate<Error>([](const Error& e) {
                           return e.code() == ErrorCode::CorruptImage;
                         }));
  REQUIRE_THROWS_AS(inflate_bytes(packed, data.size() - 1), Error);
  Bytes garbage = {0xde, 0xad, 0xbe, 0xef};
  REQUIRE_THROWS_AS(inflate_bytes(garbage, 16), Error);
}

TEST_CASE("zero length compressed payload") {
  Bytes packed = deflate_bytes({});
  REQUIRE(!packed.empty());
  REQUIRE(inflate_bytes(packed, 0).empty());
}
