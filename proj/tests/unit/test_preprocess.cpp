#include <catch_amalgamated.hpp>

#include <cmath>
#include <cstring>

#include "colearn/common.hpp"
#include "colearn/preprocess.hpp"
#include "colearn/volume.hpp"

using colearn::AugmentSpec;
using colearn::InputTensor;
using colearn::Volume;
using colearn::VolumeKind;

TEST_CASE("resample output shape follows shape*spacing/target", "[preprocess]") {
  Volume v = Volume::make({64, 128, 128}, VolumeKind::hu,
                          std::array<double, 3>{2.0, 1.0, 1.0}, 0.f);
  Volume out = colearn::resample_isotropic(v, 1.0);
  CHECK(out.shape == std::array<int64_t, 3>{128, 128, 128});
  REQUIRE(out.spacing_mm.has_value());
  CHECK((*out.spacing_mm)[0] == 1.0);
}

TEST_CASE("resampling a constant stays constant", "[preprocess]") {
  Volume v = Volume::make({10, 12, 14}, VolumeKind::hu,
                          std::array<double, 3>{1.7, 0.9, 1.2}, 0.3f);
  for (double target : {0.8, 1.0, 1.3}) {
    Volume out = colearn::resample_isotropic(v, target);
    for (float x : out.data) CHECK(x == Catch::Approx(0.3).margin(1e-6));
  }
}

TEST_CASE("resampling reproduces an axial ramp", "[preprocess]") {
  // value = physical z coordinate, so the resampled value at index z' under
  // 1mm spacing should be z' itself (away from the clamped far edge)
  Volume v = Volume::make({10, 3, 3}, VolumeKind::hu,
                          std::array<double, 3>{2.0, 1.0, 1.0}, 0.f);
  for (int64_t z = 0; z < 10; ++z)
    for (int64_t y = 0; y < 3; ++y)
      for (int64_t x = 0; x < 3; ++x) v.at(z, y, x) = float(2 * z);
  Volume out = colearn::resample_isotropic(v, 1.0);
  REQUIRE(out.shape[0] == 20);
  for (int64_t z = 0; z <= 18; ++z)
    CHECK(std::abs(double(out.at(z, 1, 1)) - double(z)) <= 1e-5);
}

TEST_CASE("resample validates its inputs", "[preprocess]") {
  Volume nospacing = Volume::make({4, 4, 4}, VolumeKind::hu);
  CHECK_THROWS(colearn::resample_isotropic(nospacing, 1.0));

  Volume v = Volume::make({2, 8, 8}, VolumeKind::hu,
                          std::array<double, 3>{0.1, 1.0, 1.0}, 0.f);
  CHECK_THROWS(colearn::resample_isotropic(v, 1.0));  // z collapses to 0
  CHECK_THROWS(colearn::resample_isotropic(v, -1.0));
}

TEST_CASE("resample at the volume's own spacing is the identity", "[preprocess]") {
  colearn::Rng rng(31);
  Volume v = Volume::make({6, 7, 8}, VolumeKind::hu,
                          std::array<double, 3>{1.3, 1.3, 1.3}, 0.f);
  for (auto& x : v.data) x = float(rng.uniform(-900.0, 300.0));
  Volume out = colearn::resample_isotropic(v, 1.3);
  REQUIRE(out.shape == v.shape);
  for (size_t i = 0; i < v.data.size(); ++i)
    CHECK(std::abs(double(out.data[i]) - double(v.data[i])) <= 1e-6);
}

TEST_CASE("resampled masks stay binary", "[preprocess]") {
  colearn::Rng rng(7);
  Volume m = Volume::make({9, 9, 9}, VolumeKind::mask,
                          std::array<double, 3>{1.5, 1.5, 1.5}, 0.f);
  for (auto& x : m.data) x = rng.uniform() < 0.4 ? 1.f : 0.f;
  Volume out = colearn::resample_isotropic(m, 1.0);
  for (float x : out.data) CHECK((x == 0.f || x == 1.f));
}

TEST_CASE("lung masking pads non-lung voxels", "[preprocess]") {
  colearn::Rng rng(13);
  Volume v = Volume::make({5, 6, 7}, VolumeKind::hu);
  for (auto& x : v.data) x = float(rng.uniform(-1000.0, 400.0));
  Volume ones = Volume::make(v.shape, VolumeKind::mask, std::nullopt, 1.f);
  Volume zeros = Volume::make(v.shape, VolumeKind::mask, std::nullopt, 0.f);

  Volume same = colearn::apply_lung_mask(v, ones);
  CHECK(std::memcmp(same.data.data(), v.data.data(),
                    v.data.size() * sizeof(float)) == 0);

  Volume padded = colearn::apply_lung_mask(v, zeros);
  for (float x : padded.data) CHECK(x == 170.f);

  Volume mixed = zeros;
  for (auto& x : mixed.data) x = rng.uniform() < 0.5 ? 1.f : 0.f;
  Volume out = colearn::apply_lung_mask(v, mixed, -7.0);
  for (size_t i = 0; i < v.data.size(); ++i) {
    const float want = mixed.data[i] != 0.f ? v.data[i] : -7.f;
    CHECK(out.data[i] == want);
  }

  Volume small = Volume::make({5, 6, 6}, VolumeKind::mask, std::nullopt, 1.f);
  CHECK_THROWS(colearn::apply_lung_mask(v, small));
}

TEST_CASE("hu normalization maps the window to [0,1]", "[preprocess]") {
  Volume v = Volume::make({1, 1, 5}, VolumeKind::hu);
  v.data = {-1000.f, 400.f, 600.f, 170.f, -1200.f};
  Volume out = colearn::normalize_hu(v);
  CHECK(out.kind == VolumeKind::normalized);
  CHECK(out.data[0] == 0.0f);
  CHECK(out.data[1] == 1.0f);
  CHECK(out.data[2] == 1.0f);  // clamped above the window
  CHECK(double(out.data[3]) == Catch::Approx(0.8357142857).epsilon(1e-7));
  CHECK(out.data[4] == 0.0f);

  CHECK_THROWS(colearn::normalize_hu(v, 400.0, 400.0));
  Volume bad = v;
  bad.data[2] = std::numeric_limits<float>::infinity();
  CHECK_THROWS(colearn::normalize_hu(bad));
}

TEST_CASE("hu normalization is monotone", "[preprocess]") {
  Volume v = Volume::make({1, 1, 64}, VolumeKind::hu);
  for (int i = 0; i < 64; ++i) v.data[size_t(i)] = float(-1100 + i * 30);
  Volume out = colearn::normalize_hu(v);
  for (int i = 1; i < 64; ++i) CHECK(out.data[size_t(i)] >= out.data[size_t(i - 1)]);
}

TEST_CASE("crop_or_pad identity and symmetric crop", "[preprocess]") {
  colearn::Rng rng(3);
  Volume v = Volume::make({16, 16, 16}, VolumeKind::normalized);
  for (auto& x : v.data) x = float(rng.uniform());
  Volume same = colearn::crop_or_pad(v, 16);
  CHECK(std::memcmp(same.data.data(), v.data.data(),
                    v.data.size() * sizeof(float)) == 0);

  Volume tall = Volume::make({18, 16, 16}, VolumeKind::normalized);
  for (auto& x : tall.data) x = float(rng.uniform());
  Volume cropped = colearn::crop_or_pad(tall, 16);
  for (int64_t z = 0; z < 16; ++z)
    for (int64_t y = 0; y < 16; ++y)
      for (int64_t x = 0; x < 16; ++x)
        CHECK(cropped.at(z, y, x) == tall.at(z + 1, y, x));
}

TEST_CASE("crop_or_pad mixed axes follow the index map", "[preprocess]") {
  colearn::Rng rng(9);
  Volume v = Volume::make({31, 33, 32}, VolumeKind::normalized);
  for (auto& x : v.data) x = float(rng.uniform());
  Volume out = colearn::crop_or_pad(v, 32);
  REQUIRE(out.shape == std::array<int64_t, 3>{32, 32, 32});
  const float pad = colearn::normalize_hu_value(170.0);
  // z: 31 -> pad one slice at the top end; y: 33 -> drop the first source
  // row is not symmetric here, (33-32)/2 = 0 so rows 0..31 survive; x: as-is
  for (int64_t z = 0; z < 32; ++z)
    for (int64_t y = 0; y < 32; ++y)
      for (int64_t x = 0; x < 32; ++x) {
        const float got = out.at(z, y, x);
        if (z < 31) CHECK(got == v.at(z, y, x));
        else CHECK(got == pad);
      }

  Volume m = Volume::make({3, 3, 3}, VolumeKind::mask, std::nullopt, 1.f);
  Volume mp = colearn::crop_or_pad(m, 5);
  CHECK(mp.at(0, 0, 0) == 0.f);  // masks pad with zero
  CHECK(mp.at(2, 2, 2) == 1.f);
  Volume forced = colearn::crop_or_pad(m, 5, 0.25f);
  CHECK(forced.at(0, 0, 0) == 0.25f);
}

TEST_CASE("assemble_input stacks the two channels", "[preprocess]") {
  colearn::Rng rng(21);
  Volume ct = Volume::make({8, 8, 8}, VolumeKind::normalized);
  for (auto& x : ct.data) x = float(rng.uniform());
  Volume mask = Volume::make({8, 8, 8}, VolumeKind::mask);
  for (auto& x : mask.data) x = rng.uniform() < 0.3 ? 1.f : 0.f;

  InputTensor t = colearn::assemble_input(ct, mask);
  REQUIRE(t.data.shape == colearn::Shape{2, 8, 8, 8});
  CHECK(t.side() == 8);
  Volume ct2 = colearn::channel_volume(t, 0);
  Volume mk2 = colearn::channel_volume(t, 1);
  CHECK(ct2.data == ct.data);
  CHECK(mk2.data == mask.data);

  Volume halfmask = mask;
  halfmask.data[5] = 0.5f;
  CHECK_THROWS(colearn::assemble_input(ct, halfmask));

  Volume other = Volume::make({8, 8, 9}, VolumeKind::mask);
  CHECK_THROWS(colearn::assemble_input(ct, other));
  CHECK_THROWS(colearn::assemble_input(mask, mask));  // wrong kind in slot 0
}

namespace {

InputTensor random_input(int64_t s, uint64_t seed) {
  colearn::Rng rng(seed);
  InputTensor t;
  t.data = colearn::Tensor<float>({2, s, s, s});
  const int64_t vox = s * s * s;
  for (int64_t i = 0; i < vox; ++i) t.data.data[size_t(i)] = float(rng.uniform());
  for (int64_t i = vox; i < 2 * vox; ++i)
    t.data.data[size_t(i)] = rng.uniform() < 0.2 ? 1.f : 0.f;
  return t;
}

}  // namespace

TEST_CASE("augment with zero bounds is the identity", "[preprocess]") {
  InputTensor t = random_input(12, 5);
  AugmentSpec spec;
  spec.max_rotation_deg = 0.0;
  spec.max_shift_voxels = 0;
  InputTensor out = colearn::augment(t, spec);
  CHECK(std::memcmp(out.data.ptr(), t.data.ptr(),
                    size_t(t.data.numel()) * sizeof(float)) == 0);
}

TEST_CASE("a pure +1 z shift moves a one-hot mask by one slice", "[preprocess]") {
  // find a seed whose first three inclusive draws over {-1,0,1} are +1,0,0
  uint64_t seed = 0;
  bool found = false;
  for (uint64_t s = 0; s < 5000 && !found; ++s) {
    colearn::Rng r(s);
    if (r.uniform_int(-1, 1) == 1 && r.uniform_int(-1, 1) == 0 &&
        r.uniform_int(-1, 1) == 0) {
      seed = s;
      found = true;
    }
  }
  REQUIRE(found);

  const int64_t s = 8;
  InputTensor t;
  t.data = colearn::Tensor<float>({2, s, s, s});
  const int64_t vox = s * s * s;
  t.data.data[size_t(vox + (3 * s + 4) * s + 5)] = 1.f;  // mask one-hot at (3,4,5)

  AugmentSpec spec;
  spec.max_rotation_deg = 0.0;
  spec.max_shift_voxels = 1;
  spec.rng_seed = seed;
  InputTensor out = colearn::augment(t, spec);
  const float* mk = out.data.ptr() + vox;
  for (int64_t z = 0; z < s; ++z)
    for (int64_t y = 0; y < s; ++y)
      for (int64_t x = 0; x < s; ++x) {
        const float want = (z == 4 && y == 4 && x == 5) ? 1.f : 0.f;
        CHECK(mk[(z * s + y) * s + x] == want);
      }
  // vacated z=0 slice takes the CT fill
  CHECK(out.data.ptr()[0] == spec.ct_fill);
}

TEST_CASE("augment is deterministic in the seed and keeps the tensor valid",
          "[preprocess]") {
  InputTensor t = random_input(16, 77);
  AugmentSpec spec;
  spec.rng_seed = 99;
  InputTensor a = colearn::augment(t, spec);
  InputTensor b = colearn::augment(t, spec);
  CHECK(std::memcmp(a.data.ptr(), b.data.ptr(),
                    size_t(a.data.numel()) * sizeof(float)) == 0);
  CHECK_NOTHROW(colearn::validate_input_tensor(a));

  spec.rng_seed = 100;
  InputTensor c = colearn::augment(t, spec);
  CHECK(std::memcmp(a.data.ptr(), c.data.ptr(),
                    size_t(a.data.numel()) * sizeof(float)) != 0);
}

TEST_CASE("fallback segmentation keeps interior air only", "[preprocess]") {
  const int64_t n = 24;
  Volume v = Volume::make({n, n, n}, VolumeKind::hu, std::nullopt, 40.f);
  for (int64_t z = 4; z < 20; ++z)
    for (int64_t y = 4; y < 20; ++y)
      for (int64_t x = 4; x < 20; ++x) v.at(z, y, x) = -1000.f;
  // outside-body air touching the x border should be discarded
  for (int64_t z = 0; z < n; ++z)
    for (int64_t y = 10; y < 14; ++y) v.at(z, y, 0) = -1000.f;

  Volume mask = colearn::fallback_lung_segment(v);
  CHECK(mask.at(12, 12, 12) == 1.f);
  CHECK(mask.at(12, 12, 0) == 0.f);
  // the air box itself is fully covered (closing only adds voxels)
  for (int64_t z = 4; z < 20; ++z)
    for (int64_t y = 4; y < 20; ++y)
      for (int64_t x = 4; x < 20; ++x) CHECK(mask.at(z, y, x) == 1.f);
  // nothing farther than the closing radius from the box can appear
  CHECK(mask.at(1, 1, 1) == 0.f);
  CHECK(mask.at(12, 12, 22) == 0.f);
}

TEST_CASE("fallback segmentation of solid tissue is empty", "[preprocess]") {
  Volume v = Volume::make({10, 10, 10}, VolumeKind::hu, std::nullopt, 40.f);
  Volume mask = colearn::fallback_lung_segment(v);
  for (float x : mask.data) CHECK(x == 0.f);
}

TEST_CASE("re-segmenting a masked volume reproduces the mask", "[preprocess]") {
  const int64_t n = 20;
  Volume v = Volume::make({n, n, n}, VolumeKind::hu, std::nullopt, 40.f);
  for (int64_t z = 5; z < 15; ++z)
    for (int64_t y = 5; y < 15; ++y)
      for (int64_t x = 5; x < 15; ++x) v.at(z, y, x) = -1000.f;
  Volume m1 = colearn::fallback_lung_segment(v);
  Volume masked = colearn::apply_lung_mask(v, m1);
  Volume m2 = colearn::fallback_lung_segment(masked);
  CHECK(m1.data == m2.data);
}
