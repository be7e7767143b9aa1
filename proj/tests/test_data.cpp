#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "oracle_helpers.hpp"
#include "rhosim/data.hpp"

using namespace rhosim;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("rhosim_data_" + name)).string();
}

void write_bytes(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

void be32(std::vector<unsigned char>& v, std::uint32_t x) {
  v.push_back(static_cast<unsigned char>(x >> 24));
  v.push_back(static_cast<unsigned char>(x >> 16));
  v.push_back(static_cast<unsigned char>(x >> 8));
  v.push_back(static_cast<unsigned char>(x));
}

}  // namespace

TEST_CASE("gen_blobs separability and determinism") {
  auto d = gen_blobs<double>(64, 2, 2, 0.0, 7);
  CHECK(d.size() == 64);
  CHECK(d.class_count == 2);
  // zero noise: every sample sits exactly on its class mean; nearest-mean wins
  const double* f = d.features.data().data();
  std::vector<std::vector<double>> means(2);
  for (int c = 0; c < 2; ++c)
    means[c] = {f[c * 2], f[c * 2 + 1]};  // samples 0,1 are classes 0,1
  int correct = 0;
  for (std::int64_t i = 0; i < 64; ++i) {
    double best = 1e300;
    int arg = -1;
    for (int c = 0; c < 2; ++c) {
      const double dx = f[i * 2] - means[c][0], dy = f[i * 2 + 1] - means[c][1];
      if (dx * dx + dy * dy < best) {
        best = dx * dx + dy * dy;
        arg = c;
      }
    }
    if (arg == d.labels[static_cast<std::size_t>(i)]) ++correct;
  }
  CHECK(correct == 64);

  auto d2 = gen_blobs<double>(64, 2, 2, 0.0, 7);
  for (std::int64_t i = 0; i < d.features.numel(); ++i)
    CHECK(d.features.data()[i] == d2.features.data()[i]);
  CHECK(d.labels == d2.labels);

  // balanced classes +-1
  auto d3 = gen_blobs<double>(11, 3, 2, 0.5, 1);
  int counts[3] = {0, 0, 0};
  for (auto l : d3.labels) counts[l]++;
  CHECK(std::max({counts[0], counts[1], counts[2]}) -
            std::min({counts[0], counts[1], counts[2]}) <=
        1);

  CHECK_THROWS_AS(gen_blobs<double>(1, 2, 2, 0.1, 1), ValueError);
}

TEST_CASE("nearest-mean accuracy approaches the quadrature Bayes bound") {
  // class means sit 6 apart (radius-3 simplex); projecting onto the
  // separating axis, the Bayes-optimal rule is the midpoint threshold, so the
  // optimum is the Gaussian integral up to half the separation
  for (double noise : {0.5, 2.0}) {
    auto d = gen_blobs<double>(1000, 2, 2, noise, 123);
    const double bayes = oracle::normal_cdf(3.0 / noise);
    const double* f = d.features.data().data();
    // true means from the zero-noise construction
    auto clean = gen_blobs<double>(2, 2, 2, 0.0, 123);
    const double* m = clean.features.data().data();
    int correct = 0;
    for (std::int64_t i = 0; i < 1000; ++i) {
      double best = 1e300;
      int arg = -1;
      for (int c = 0; c < 2; ++c) {
        const double dx = f[i * 2] - m[c * 2], dy = f[i * 2 + 1] - m[c * 2 + 1];
        if (dx * dx + dy * dy < best) {
          best = dx * dx + dy * dy;
          arg = c;
        }
      }
      if (arg == d.labels[static_cast<std::size_t>(i)]) ++correct;
    }
    const double acc = correct / 1000.0;
    INFO("noise ", noise, " acc ", acc, " bayes ", bayes);
    CHECK(std::fabs(acc - bayes) <= 0.02);
  }
}

TEST_CASE("gen_noisy_labels flips the stated fraction") {
  auto d = gen_blobs<double>(10000, 4, 3, 0.3, 9);
  auto same = gen_noisy_labels(d, 0.0, 17);
  CHECK(same.labels == d.labels);

  auto flipped = gen_noisy_labels(d, 0.2, 17);
  std::int64_t diff = 0;
  for (std::size_t i = 0; i < d.labels.size(); ++i)
    if (d.labels[i] != flipped.labels[i]) ++diff;
  CHECK(diff >= 1800);
  CHECK(diff <= 2200);
  for (auto l : flipped.labels) {
    CHECK(l >= 0);
    CHECK(l < 4);
  }

  auto reseeded = gen_noisy_labels(d, 0.2, 18);
  CHECK(reseeded.labels != flipped.labels);
  CHECK_THROWS_AS(gen_noisy_labels(d, 1.0, 1), ValueError);
}

TEST_CASE("idx loader is bit-exact") {
  // two 2x2 images with known bytes
  std::vector<unsigned char> img;
  be32(img, 2051);
  be32(img, 2);
  be32(img, 2);
  be32(img, 2);
  for (unsigned char b : {0, 51, 102, 153, 204, 255, 10, 20}) img.push_back(b);
  std::vector<unsigned char> lab;
  be32(lab, 2049);
  be32(lab, 2);
  lab.push_back(3);
  lab.push_back(1);
  const std::string ip = temp_path("fixture_images.idx");
  const std::string lp = temp_path("fixture_labels.idx");
  write_bytes(ip, img);
  write_bytes(lp, lab);

  auto d = load_idx<double>(ip, lp);
  CHECK(d.features.shape() == std::vector<std::int64_t>{2, 1, 2, 2});
  const double want[8] = {0, 51 / 255.0, 102 / 255.0, 153 / 255.0,
                          204 / 255.0, 1.0, 10 / 255.0, 20 / 255.0};
  for (int i = 0; i < 8; ++i) CHECK(d.features.data()[i] == want[i]);
  CHECK(d.labels == std::vector<std::int64_t>{3, 1});
  CHECK(d.class_count == 4);

  // round trip reproduces the dataset exactly
  const std::string ip2 = temp_path("roundtrip_images.idx");
  const std::string lp2 = temp_path("roundtrip_labels.idx");
  save_idx(d, ip2, lp2);
  auto d2 = load_idx<double>(ip2, lp2);
  for (int i = 0; i < 8; ++i) CHECK(d2.features.data()[i] == d.features.data()[i]);
  CHECK(d2.labels == d.labels);

  // wrong magic names byte offset 0
  std::vector<unsigned char> bad;
  be32(bad, 2050);
  be32(bad, 0);
  be32(bad, 0);
  be32(bad, 0);
  const std::string bp = temp_path("bad_images.idx");
  write_bytes(bp, bad);
  try {
    load_idx<double>(bp, lp);
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("offset 0") != std::string::npos);
  }

  // count mismatch between the two files
  std::vector<unsigned char> lab3;
  be32(lab3, 2049);
  be32(lab3, 3);
  lab3.push_back(0);
  lab3.push_back(0);
  lab3.push_back(0);
  const std::string lp3 = temp_path("mismatch_labels.idx");
  write_bytes(lp3, lab3);
  CHECK_THROWS_AS(load_idx<double>(ip, lp3), FormatError);
}

TEST_CASE("csv loader") {
  const std::string p = temp_path("fixture.csv");
  {
    std::ofstream out(p, std::ios::binary);
    out << "feature_0,feature_1,label\n"
           "0.5,-1.25,0\n"
           "2,3.5,1\n"
           "-0.125,4,1\n";
  }
  auto d = load_csv<double>(p, "label");
  CHECK(d.features.shape() == std::vector<std::int64_t>{3, 2});
  const double want[6] = {0.5, -1.25, 2, 3.5, -0.125, 4};
  for (int i = 0; i < 6; ++i) CHECK(d.features.data()[i] == want[i]);
  CHECK(d.labels == std::vector<std::int64_t>{0, 1, 1});
  CHECK(d.class_count == 2);

  const std::string empty = temp_path("empty.csv");
  write_bytes(empty, {});
  CHECK_THROWS_AS(load_csv<double>(empty, "label"), FormatError);

  // label equal to the declared class count is a validation error
  CHECK_THROWS_AS(load_csv<double>(p, "label", 1), ValueError);

  CHECK_THROWS_AS(load_csv<double>(p, "target"), FormatError);

  const std::string badcell = temp_path("badcell.csv");
  {
    std::ofstream out(badcell, std::ios::binary);
    out << "feature_0,label\nabc,0\n";
  }
  try {
    load_csv<double>(badcell, "label");
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("row 2") != std::string::npos);
    CHECK(msg.find("column 1") != std::string::npos);
  }

  // save/load round trip
  const std::string rt = temp_path("roundtrip.csv");
  save_csv(d, rt);
  auto d2 = load_csv<double>(rt, "label");
  for (int i = 0; i < 6; ++i) CHECK(d2.features.data()[i] == d.features.data()[i]);
  CHECK(d2.labels == d.labels);
}

TEST_CASE("batches partition deterministically") {
  BatchPlan plan;
  plan.batch_size = 10;
  plan.shuffle_seed = 99;

  // batch_size == n: one batch, a permutation of all rows
  plan.batch_size = 13;
  auto one = batches(13, plan, 0);
  REQUIRE(one.size() == 1);
  std::set<std::int64_t> seen(one[0].begin(), one[0].end());
  CHECK(seen.size() == 13);

  // identical (seed, epoch) reproduces the order; different epochs differ
  plan.batch_size = 4;
  auto a = batches(13, plan, 3);
  auto b = batches(13, plan, 3);
  CHECK(a == b);
  CHECK(batches(13, plan, 4) != a);

  // union over one epoch covers [0, n) exactly when drop_last is off
  std::set<std::int64_t> all;
  std::int64_t total = 0;
  for (const auto& batch : a)
    for (auto i : batch) {
      all.insert(i);
      ++total;
    }
  CHECK(total == 13);
  CHECK(all.size() == 13);
  CHECK(*all.begin() == 0);
  CHECK(*all.rbegin() == 12);

  plan.drop_last = true;
  auto dropped = batches(13, plan, 3);
  CHECK(dropped.size() == 3);  // 13 = 3*4 + ragged 1
  for (const auto& batch : dropped) CHECK(batch.size() == 4);

  plan.batch_size = 0;
  CHECK_THROWS_AS(batches(13, plan, 0), ValueError);
}

TEST_CASE("gather_batch slices rows") {
  auto d = gen_blobs<double>(10, 2, 3, 0.1, 5);
  std::vector<std::int64_t> rows{7, 2, 2};
  auto [x, y] = gather_batch(d, rows);
  CHECK(x.shape() == std::vector<std::int64_t>{3, 3});
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c)
      CHECK(x.data()[r * 3 + c] == d.features.data()[rows[r] * 3 + c]);
  CHECK(y[0] == d.labels[7]);
  std::vector<std::int64_t> bad{10};
  CHECK_THROWS_AS(gather_batch(d, bad), IndexError);
}
