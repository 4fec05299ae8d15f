#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ecglang/common.hpp"
#include "ecglang/record.hpp"
#include "ecglang/rng.hpp"
#include "ecglang/tensor.hpp"
#include "ecglang/vocab.hpp"

namespace ecglang::sentence {

using json = nlohmann::json;

// A record's heartbeats flattened to token IDs in fixed 4-token frames of
// [P-slot, QRS-slot, T-slot, SEP]. segment_refs aligns 1:1 with token_ids
// and indexes the segment vector the sequence was built from; special
// tokens (MISS, SEP) carry -1.
struct TokenSequence {
  std::string record_id;
  std::vector<int32_t> token_ids;
  std::vector<int32_t> segment_refs;

  int64_t size() const { return static_cast<int64_t>(token_ids.size()); }
  int64_t n_beats() const { return size() / 4; }

  void validate(const vocab::WaveVocabulary& v) const {
    if (token_ids.size() != segment_refs.size())
      throw DataError("sequence: token_ids and segment_refs disagree");
    if (token_ids.size() % 4 != 0)
      throw DataError("sequence: length is not a whole number of beats");
    for (size_t p = 0; p < token_ids.size(); ++p) {
      int32_t id = token_ids[p];
      bool wave_slot = (p % 4) != 3;
      if (wave_slot) {
        if (!(v.is_wave_token(id) || id == vocab::kMissToken))
          throw DataError(str_format(
              "sequence: position %zu holds token %d, expected wave or MISS",
              p, id));
        if (v.is_wave_token(id) &&
            v.wave_of(id) != static_cast<WaveType>(p % 4))
          throw DataError(str_format(
              "sequence: position %zu token %d is the wrong wave", p, id));
        if (v.is_wave_token(id) && segment_refs[p] < 0)
          throw DataError(str_format(
              "sequence: wave token at position %zu lacks a segment ref", p));
      } else if (id != vocab::kSepToken) {
        throw DataError(str_format(
            "sequence: position %zu holds token %d, expected SEP", p, id));
      }
      if (!v.is_wave_token(id) && segment_refs[p] >= 0)
        throw DataError(str_format(
            "sequence: special token at position %zu has a segment ref", p));
    }
  }
};

struct BuildResult {
  TokenSequence sequence;
  int64_t n_dropped_no_qrs = 0;
};

// Groups one record's segments by beat, orders beats by index, and emits one
// 4-token frame per beat. tokens[i] is the vocabulary token assigned to
// segments[i]. A beat without a QRS segment is dropped and counted; its
// other waves have no anchor.
inline BuildResult build_sequence(const std::vector<WaveSegment>& segments,
                                  const std::vector<int32_t>& tokens,
                                  const vocab::WaveVocabulary& v,
                                  const std::string& record_id) {
  if (segments.size() != tokens.size())
    throw DataError("build_sequence: segments and tokens disagree");
  struct Slots {
    int32_t ref[3] = {-1, -1, -1};
  };
  std::map<int, Slots> beats;
  for (size_t i = 0; i < segments.size(); ++i) {
    const auto& s = segments[i];
    int w = static_cast<int>(s.wave_type);
    if (!v.is_wave_token(tokens[i]) || v.wave_of(tokens[i]) != s.wave_type)
      throw DataError(str_format(
          "build_sequence: token %d does not encode a %s segment", tokens[i],
          wave_name(s.wave_type)));
    auto& slot = beats[s.beat_idx];
    if (slot.ref[w] >= 0)
      throw DataError(str_format("build_sequence: beat %d has two %s segments",
                                 s.beat_idx, wave_name(s.wave_type)));
    slot.ref[w] = static_cast<int32_t>(i);
  }

  BuildResult out;
  out.sequence.record_id = record_id;
  for (const auto& [beat_idx, slot] : beats) {
    if (slot.ref[static_cast<int>(WaveType::QRS)] < 0) {
      ++out.n_dropped_no_qrs;
      continue;
    }
    for (WaveType t : kWaveTypes) {
      int32_t ref = slot.ref[static_cast<int>(t)];
      out.sequence.token_ids.push_back(
          ref >= 0 ? tokens[ref] : vocab::kMissToken);
      out.sequence.segment_refs.push_back(ref);
    }
    out.sequence.token_ids.push_back(vocab::kSepToken);
    out.sequence.segment_refs.push_back(-1);
  }
  out.sequence.validate(v);
  return out;
}

// One waveform-token position in a batch and the segment behind it,
// gathered so the morphology encoder can run over a flat list.
struct MorphSlot {
  int64_t row = 0;
  int64_t col = 0;
};

// Right-padded batch. attention_mask holds 1 at real tokens and 0 at PAD.
// segment_pool[i] backs slots[i]; together they cover every wave-token
// position in the batch.
struct Batch {
  Tensor<int32_t> input_ids{Shape{0, 0}};
  Tensor<float> attention_mask{Shape{0, 0}};
  std::vector<std::string> record_ids;
  std::vector<MorphSlot> slots;
  std::vector<WaveSegment> segment_pool;

  int64_t rows() const { return input_ids.dim(0); }
  int64_t cols() const { return input_ids.dim(1); }
};

// Stacks sequences into a batch, truncating to whole beats when a sequence
// exceeds max_len and right-padding the rest. seq_segments[i] is the segment
// vector sequence i's refs index into.
inline Batch pad_and_batch(
    const std::vector<TokenSequence>& seqs,
    const std::vector<const std::vector<WaveSegment>*>& seq_segments,
    int64_t max_len = 256) {
  if (seqs.empty()) throw DataError("pad_and_batch: no sequences");
  if (seqs.size() != seq_segments.size())
    throw DataError("pad_and_batch: sequences and segment vectors disagree");
  if (max_len < 4)
    throw ConfigError("pad_and_batch: max_len must be at least 4");

  int64_t cap = max_len - max_len % 4;
  std::vector<int64_t> lens(seqs.size());
  int64_t width = 0;
  for (size_t i = 0; i < seqs.size(); ++i) {
    lens[i] = std::min<int64_t>(seqs[i].size(),
                                seqs[i].size() > max_len ? cap : max_len);
    width = std::max(width, lens[i]);
  }

  int64_t b = static_cast<int64_t>(seqs.size());
  Batch out;
  out.input_ids = Tensor<int32_t>::full(Shape{b, width}, vocab::kPadToken);
  out.attention_mask = Tensor<float>::zeros(Shape{b, width});
  for (size_t i = 0; i < seqs.size(); ++i) {
    const auto& seq = seqs[i];
    out.record_ids.push_back(seq.record_id);
    for (int64_t p = 0; p < lens[i]; ++p) {
      out.input_ids[int64_t(i) * width + p] = seq.token_ids[p];
      out.attention_mask[int64_t(i) * width + p] = 1.0f;
      int32_t ref = seq.segment_refs[p];
      if (ref < 0) continue;
      if (ref >= static_cast<int32_t>(seq_segments[i]->size()))
        throw DataError(str_format(
            "pad_and_batch: sequence %zu ref %d exceeds its segment vector",
            i, ref));
      out.slots.push_back({static_cast<int64_t>(i), p});
      out.segment_pool.push_back((*seq_segments[i])[ref]);
    }
  }
  return out;
}

// Masking policy. The default replaces every selected token with MASK;
// bert_corruption switches to the 80/10/10 mask/random/keep split.
struct MlmSpec {
  double mask_prob = 0.2;
  bool bert_corruption = false;

  void validate() const {
    if (!(mask_prob > 0.0 && mask_prob <= 1.0))
      throw ConfigError("mlm: mask_prob must be in (0, 1]");
  }
};

// Batch with masked inputs. mlm_labels carries the original token exactly at
// selected positions and -1 elsewhere; slots and segment_pool still describe
// every wave-token position of the uncorrupted batch.
struct MaskedBatch {
  Tensor<int32_t> input_ids{Shape{0, 0}};
  Tensor<float> attention_mask{Shape{0, 0}};
  Tensor<int32_t> mlm_labels{Shape{0, 0}};
  std::vector<std::string> record_ids;
  std::vector<MorphSlot> slots;
  std::vector<WaveSegment> segment_pool;

  int64_t rows() const { return input_ids.dim(0); }
  int64_t cols() const { return input_ids.dim(1); }
};

// Selects floor(mask_prob * maskable) positions per row, at least one when
// the row has any wave token, and never a special. Deterministic in seed.
inline MaskedBatch apply_mlm_mask(const Batch& batch,
                                  const vocab::WaveVocabulary& v,
                                  const MlmSpec& spec, uint64_t seed) {
  spec.validate();
  MaskedBatch out;
  out.input_ids = batch.input_ids.clone();
  out.attention_mask = batch.attention_mask.clone();
  out.mlm_labels = Tensor<int32_t>::full(
      Shape{batch.rows(), batch.cols()}, -1);
  out.record_ids = batch.record_ids;
  out.slots = batch.slots;
  out.segment_pool = batch.segment_pool;

  Rng rng(seed);
  int64_t width = batch.cols();
  int32_t n_wave = v.vocab_size() - vocab::kFirstWaveToken;
  for (int64_t r = 0; r < batch.rows(); ++r) {
    std::vector<int64_t> maskable;
    for (int64_t p = 0; p < width; ++p)
      if (v.is_wave_token(batch.input_ids[r * width + p]))
        maskable.push_back(p);
    if (maskable.empty()) continue;
    int64_t n_mask = std::max<int64_t>(
        1, static_cast<int64_t>(spec.mask_prob *
                                static_cast<double>(maskable.size())));
    rng.shuffle(maskable);
    for (int64_t k = 0; k < n_mask; ++k) {
      int64_t p = maskable[k];
      int32_t orig = batch.input_ids[r * width + p];
      out.mlm_labels[r * width + p] = orig;
      int32_t replacement = vocab::kMaskToken;
      if (spec.bert_corruption) {
        double u = rng.uniform();
        if (u < 0.8) {
          replacement = vocab::kMaskToken;
        } else if (u < 0.9) {
          replacement = vocab::kFirstWaveToken +
                        static_cast<int32_t>(rng.uniform_index(n_wave));
        } else {
          replacement = orig;
        }
      }
      out.input_ids[r * width + p] = replacement;
    }
  }
  return out;
}

inline json sequence_to_json(const TokenSequence& seq) {
  json j;
  j["record_id"] = seq.record_id;
  j["token_ids"] = seq.token_ids;
  j["segment_refs"] = seq.segment_refs;
  return j;
}

inline TokenSequence sequence_from_json(const json& j) {
  TokenSequence seq;
  try {
    seq.record_id = j.at("record_id").get<std::string>();
    seq.token_ids = j.at("token_ids").get<std::vector<int32_t>>();
    seq.segment_refs = j.at("segment_refs").get<std::vector<int32_t>>();
  } catch (const json::exception& e) {
    throw DataError(str_format("token stream: %s", e.what()));
  }
  if (seq.token_ids.size() != seq.segment_refs.size())
    throw DataError("token stream: token_ids and segment_refs disagree");
  return seq;
}

// One record per line keeps the stream mergeable and streamable.
inline void save_token_stream(const std::string& path,
                              const std::vector<TokenSequence>& seqs) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError(str_format("cannot write %s", path.c_str()));
  for (const auto& seq : seqs)
    f << sequence_to_json(seq).dump() << '\n';
  if (!f) throw DataError(str_format("write failed for %s", path.c_str()));
}

inline std::vector<TokenSequence> load_token_stream(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError(str_format("cannot read %s", path.c_str()));
  std::vector<TokenSequence> out;
  std::string line;
  int64_t line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded())
      throw DataError(str_format("%s:%lld: not valid JSON", path.c_str(),
                                 static_cast<long long>(line_no)));
    out.push_back(sequence_from_json(j));
  }
  return out;
}

}  // namespace ecglang::sentence
