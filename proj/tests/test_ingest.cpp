#include <gtest/gtest.h>

#include <unistd.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <set>

#include "ecglang/ingest.hpp"
#include "ecglang/rng.hpp"

using namespace ecglang;
using namespace ecglang::ingest;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const char* tag) {
  fs::path p = fs::temp_directory_path() /
               (std::string("ecglang_test_") + tag + "_" +
                std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Dataset random_dataset(int n, bool with_labels, uint64_t seed) {
  Dataset ds;
  ds.fs = 500;
  if (with_labels) ds.label_set.names = {"ABSENT_P", "IRREGULAR_RR"};
  Rng rng(seed);
  for (int i = 0; i < n; ++i) {
    EcgRecord r;
    r.record_id = str_format("rec-%03d", i);
    r.fs = ds.fs;
    int len = 50 + static_cast<int>(rng.uniform_index(200));
    r.samples.resize(len);
    for (auto& v : r.samples)
      v = static_cast<float>(rng.uniform(-2.0, 2.0));
    if (with_labels)
      r.labels = std::vector<uint8_t>{
          static_cast<uint8_t>(rng.uniform_index(2)),
          static_cast<uint8_t>(rng.uniform_index(2))};
    ds.records.push_back(std::move(r));
  }
  return ds;
}

}  // namespace

TEST(DatasetIo, RoundTripBitIdentical) {
  auto dir = temp_dir("roundtrip");
  Dataset ds = random_dataset(17, true, 42);
  write_records(ds, dir);
  Dataset back = read_records(dir);
  ASSERT_EQ(back.records.size(), ds.records.size());
  EXPECT_EQ(back.fs, ds.fs);
  EXPECT_EQ(back.label_set.names, ds.label_set.names);
  for (size_t i = 0; i < ds.records.size(); ++i) {
    EXPECT_EQ(back.records[i].record_id, ds.records[i].record_id);
    EXPECT_EQ(back.records[i].fs, ds.records[i].fs);
    ASSERT_EQ(back.records[i].samples.size(), ds.records[i].samples.size());
    for (size_t k = 0; k < ds.records[i].samples.size(); ++k)
      EXPECT_EQ(back.records[i].samples[k], ds.records[i].samples[k]);
    ASSERT_TRUE(back.records[i].labels.has_value());
    EXPECT_EQ(*back.records[i].labels, *ds.records[i].labels);
  }
  fs::remove_all(dir);
}

TEST(DatasetIo, UnlabeledDatasetHasNoLabelsFile) {
  auto dir = temp_dir("nolabels");
  Dataset ds = random_dataset(5, false, 7);
  write_records(ds, dir);
  EXPECT_FALSE(fs::exists(dir / "labels.bin"));
  Dataset back = read_records(dir);
  for (const auto& r : back.records) EXPECT_FALSE(r.labels.has_value());
  fs::remove_all(dir);
}

TEST(DatasetIo, MixedSampleRatePreserved) {
  auto dir = temp_dir("mixedfs");
  Dataset ds = random_dataset(3, false, 11);
  ds.records[1].fs = 250;
  write_records(ds, dir);
  Dataset back = read_records(dir);
  EXPECT_EQ(back.records[1].fs, 250);
  EXPECT_EQ(back.records[0].fs, 500);
  fs::remove_all(dir);
}

TEST(DatasetIo, MissingManifestThrows) {
  auto dir = temp_dir("missing");
  EXPECT_THROW(read_records(dir), DataError);
  fs::remove_all(dir);
}

TEST(DatasetIo, MalformedManifestThrows) {
  auto dir = temp_dir("malformed");
  io::write_text_atomic(dir / "manifest.json", "{not json");
  try {
    read_records(dir);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("manifest"), std::string::npos);
  }
  fs::remove_all(dir);
}

TEST(DatasetIo, TruncatedSignalsNamesRecordAndOffset) {
  auto dir = temp_dir("truncated");
  Dataset ds = random_dataset(3, false, 3);
  write_records(ds, dir);
  auto blob = io::read_binary(dir / "signals.bin");
  blob.resize(blob.size() / 2);
  io::write_binary_atomic(dir / "signals.bin", blob.data(), blob.size());
  try {
    read_records(dir);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("rec-"), std::string::npos) << msg;
    EXPECT_NE(msg.find("byte offset"), std::string::npos) << msg;
  }
  fs::remove_all(dir);
}

TEST(DatasetIo, DuplicateIdRejected) {
  Dataset ds = random_dataset(3, false, 5);
  ds.records[2].record_id = ds.records[0].record_id;
  EXPECT_THROW(ds.validate(), DataError);
}

TEST(DatasetIo, LabelWidthMismatchRejected) {
  Dataset ds = random_dataset(3, true, 9);
  ds.records[1].labels = std::vector<uint8_t>{1};
  EXPECT_THROW(ds.validate(), DataError);
}

TEST(RecordValidate, NonFiniteSampleNamesIndex) {
  EcgRecord r;
  r.record_id = "bad";
  r.fs = 500;
  r.samples = {0.0f, 1.0f, std::numeric_limits<float>::quiet_NaN()};
  try {
    r.validate();
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("2"), std::string::npos);
  }
}

TEST(Synthetic, DeterministicForSameSeed) {
  auto [ra, ta] = generate_synthetic(3, 500, 10.0, RhythmClass::regular, 99);
  auto [rb, tb] = generate_synthetic(3, 500, 10.0, RhythmClass::regular, 99);
  ASSERT_EQ(ra.size(), rb.size());
  for (size_t i = 0; i < ra.size(); ++i) {
    EXPECT_EQ(ra[i].record_id, rb[i].record_id);
    ASSERT_EQ(ra[i].samples.size(), rb[i].samples.size());
    for (size_t k = 0; k < ra[i].samples.size(); ++k)
      ASSERT_EQ(ra[i].samples[k], rb[i].samples[k]);
    ASSERT_EQ(ta[i].beats.size(), tb[i].beats.size());
    for (size_t b = 0; b < ta[i].beats.size(); ++b)
      EXPECT_EQ(ta[i].beats[b].r_peak, tb[i].beats[b].r_peak);
  }
}

TEST(Synthetic, DifferentSeedsDiffer) {
  auto [ra, ta] = generate_synthetic(1, 500, 10.0, RhythmClass::regular, 1);
  auto [rb, tb] = generate_synthetic(1, 500, 10.0, RhythmClass::regular, 2);
  EXPECT_NE(ra[0].samples, rb[0].samples);
}

TEST(Synthetic, BeatCountMatchesHeartRateRange) {
  auto [recs, truths] =
      generate_synthetic(20, 500, 10.0, RhythmClass::regular, 7);
  for (const auto& t : truths) {
    EXPECT_GE(t.beats.size(), 8u) << t.record_id;
    EXPECT_LE(t.beats.size(), 14u) << t.record_id;
  }
}

TEST(Synthetic, FiducialsOrderedAndInBounds) {
  auto [recs, truths] =
      generate_synthetic(5, 500, 10.0, RhythmClass::regular, 13);
  for (size_t i = 0; i < recs.size(); ++i) {
    int64_t n = static_cast<int64_t>(recs[i].samples.size());
    EXPECT_NO_THROW(truths[i].validate(n));
    for (const auto& b : truths[i].beats) {
      ASSERT_TRUE(b.p && b.qrs && b.t);
      EXPECT_LE(b.p->offset, b.qrs->onset);
      EXPECT_LE(b.qrs->offset, b.t->onset);
      EXPECT_EQ(b.r_peak, b.qrs->peak);
    }
  }
}

TEST(Synthetic, RegularRhythmHasConstantRr) {
  auto [recs, truths] =
      generate_synthetic(5, 500, 10.0, RhythmClass::regular, 21);
  for (const auto& t : truths) {
    ASSERT_GE(t.beats.size(), 3u);
    int64_t rr0 = t.beats[1].r_peak - t.beats[0].r_peak;
    for (size_t b = 2; b < t.beats.size(); ++b) {
      int64_t rr = t.beats[b].r_peak - t.beats[b - 1].r_peak;
      EXPECT_NEAR(static_cast<double>(rr), static_cast<double>(rr0), 1.0);
    }
  }
}

TEST(Synthetic, IrregularRhythmVariesRr) {
  auto [recs, truths] =
      generate_synthetic(5, 500, 10.0, RhythmClass::irregular_rr, 21);
  int varied = 0;
  for (const auto& t : truths) {
    ASSERT_GE(t.beats.size(), 3u);
    int64_t rr_min = INT64_MAX, rr_max = 0;
    for (size_t b = 1; b < t.beats.size(); ++b) {
      int64_t rr = t.beats[b].r_peak - t.beats[b - 1].r_peak;
      rr_min = std::min(rr_min, rr);
      rr_max = std::max(rr_max, rr);
    }
    if (rr_max - rr_min > 10) ++varied;
  }
  EXPECT_EQ(varied, 5);
}

TEST(Synthetic, AbsentPZeroesBumpAndOmitsFiducial) {
  auto [recs, truths] =
      generate_synthetic(5, 500, 10.0, RhythmClass::absent_p, 33);
  for (const auto& t : truths) {
    for (size_t b = 0; b < t.beats.size(); ++b) {
      EXPECT_FALSE(t.beats[b].p.has_value());
      EXPECT_EQ(t.bump_params[b][0].amp_mv, 0.0);
    }
  }
}

TEST(Synthetic, RPeakSampleNearTemplateAmplitude) {
  auto [recs, truths] =
      generate_synthetic(3, 500, 10.0, RhythmClass::regular, 55);
  for (size_t i = 0; i < recs.size(); ++i)
    for (const auto& b : truths[i].beats) {
      float v = recs[i].samples[b.r_peak];
      EXPECT_GT(v, 0.75f);
      EXPECT_LT(v, 1.25f);
    }
}

TEST(Splits, SizesPartitionAndDeterminism) {
  auto [recs, truths] =
      generate_synthetic(100, 500, 2.0, RhythmClass::regular, 1);
  SplitSpec spec;
  spec.seed = 4;
  SplitResult a = make_splits(recs, spec);
  SplitResult b = make_splits(recs, spec);
  EXPECT_EQ(a.train_full.size(), 70u);
  EXPECT_EQ(a.val.size(), 10u);
  EXPECT_EQ(a.test.size(), 20u);
  EXPECT_EQ(a.train, a.train_full);  // label_fraction = 1
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.val, b.val);
  EXPECT_EQ(a.test, b.test);

  std::set<std::string> all;
  for (const auto& id : a.train_full) all.insert(id);
  for (const auto& id : a.val) all.insert(id);
  for (const auto& id : a.test) all.insert(id);
  EXPECT_EQ(all.size(), 100u);
}

TEST(Splits, DifferentSeedsShuffleDifferently) {
  auto [recs, truths] =
      generate_synthetic(100, 500, 2.0, RhythmClass::regular, 1);
  SplitSpec sa, sb;
  sa.seed = 1;
  sb.seed = 2;
  EXPECT_NE(make_splits(recs, sa).train_full,
            make_splits(recs, sb).train_full);
}

TEST(Splits, LabelFractionKeepsAtLeastOne) {
  auto [recs, truths] =
      generate_synthetic(100, 500, 2.0, RhythmClass::regular, 1);
  SplitSpec spec;
  spec.label_fraction = 0.01;
  SplitResult r = make_splits(recs, spec);
  EXPECT_EQ(r.train.size(), 1u);
  EXPECT_EQ(r.train_full.size(), 70u);
  EXPECT_EQ(r.train[0], r.train_full[0]);

  spec.label_fraction = 0.1;
  r = make_splits(recs, spec);
  EXPECT_EQ(r.train.size(), 7u);
}

TEST(Splits, StratifiedSubsampleCoversRareLabel) {
  auto [recs, truths] =
      generate_synthetic(100, 500, 2.0, RhythmClass::regular, 1);
  // two labels; label 1 is rare (4 carriers)
  for (size_t i = 0; i < recs.size(); ++i)
    recs[i].labels = std::vector<uint8_t>{1, static_cast<uint8_t>(i % 25 == 0)};
  SplitSpec spec;
  spec.label_fraction = 0.1;
  spec.stratify = true;
  spec.seed = 3;
  SplitResult r = make_splits(recs, spec);
  EXPECT_EQ(r.train.size(), 7u);
  std::set<std::string> rare;
  for (size_t i = 0; i < recs.size(); ++i)
    if ((*recs[i].labels)[1]) rare.insert(recs[i].record_id);
  int rare_in_train_full = 0, rare_in_train = 0;
  for (const auto& id : r.train_full) rare_in_train_full += rare.count(id);
  for (const auto& id : r.train) rare_in_train += rare.count(id);
  if (rare_in_train_full > 0) EXPECT_GT(rare_in_train, 0);
  // subsample stays inside the train partition
  std::set<std::string> full(r.train_full.begin(), r.train_full.end());
  for (const auto& id : r.train) EXPECT_TRUE(full.count(id));
}

TEST(Splits, InvalidSpecRejected) {
  auto [recs, truths] =
      generate_synthetic(10, 500, 2.0, RhythmClass::regular, 1);
  SplitSpec bad;
  bad.train = 0.5;
  bad.val = 0.2;
  bad.test = 0.2;  // sums to 0.9
  EXPECT_THROW(make_splits(recs, bad), ConfigError);
  SplitSpec bad_lf;
  bad_lf.label_fraction = 0.0;
  EXPECT_THROW(make_splits(recs, bad_lf), ConfigError);
}
