#include "seqft/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>

#include "seqft/checkpoint.hpp"

namespace seqft {
namespace {

constexpr ShapeFamily kConcreteFamilies[] = {ShapeFamily::disk, ShapeFamily::ring, ShapeFamily::bar,
                                            ShapeFamily::blob, ShapeFamily::checker};

constexpr double kBackground = 0.25;
constexpr double kContrast = 0.3;

struct Canvas {
  int size;
  std::vector<std::uint8_t> labels;
  std::uint8_t& at(int y, int x) { return labels[static_cast<std::size_t>(y * size + x)]; }
};

// Labels for one sample. For three-class tasks class 2 is an inner core.
void draw_shape(ShapeFamily family, int classes, Rng& rng, Canvas& c) {
  const int s = c.size;
  const double cy = rng.uniform(0.3, 0.7) * s;
  const double cx = rng.uniform(0.3, 0.7) * s;
  const double scale = s / 32.0;
  auto for_each_pixel = [&](auto&& f) {
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x) f(y, x, y + 0.5 - cy, x + 0.5 - cx);
  };
  switch (family) {
    case ShapeFamily::disk: {
      const double r = rng.uniform(4.0, 9.0) * scale;
      for_each_pixel([&](int y, int x, double dy, double dx) {
        const double d = std::hypot(dy, dx);
        if (d <= r) c.at(y, x) = (classes > 2 && d <= 0.5 * r) ? 2 : 1;
      });
      break;
    }
    case ShapeFamily::ring: {
      const double outer = rng.uniform(6.0, 11.0) * scale;
      const double inner = outer - rng.uniform(2.0, 4.0) * scale;
      for_each_pixel([&](int y, int x, double dy, double dx) {
        const double d = std::hypot(dy, dx);
        if (d <= outer && d > inner) c.at(y, x) = 1;
        else if (classes > 2 && d <= inner) c.at(y, x) = 2;
      });
      break;
    }
    case ShapeFamily::bar: {
      const double half_len = rng.uniform(6.0, 12.0) * scale;
      const double half_thick = rng.uniform(1.5, 3.0) * scale;
      const double theta = rng.uniform(0.0, std::numbers::pi);
      const double ux = std::cos(theta), uy = std::sin(theta);
      for_each_pixel([&](int y, int x, double dy, double dx) {
        const double along = dx * ux + dy * uy;
        const double across = -dx * uy + dy * ux;
        if (std::abs(along) <= half_len && std::abs(across) <= half_thick) {
          c.at(y, x) = (classes > 2 && std::abs(along) <= half_len / 3.0) ? 2 : 1;
        }
      });
      break;
    }
    case ShapeFamily::blob: {
      double py[3], px[3], sig[3];
      for (int k = 0; k < 3; ++k) {
        py[k] = cy + rng.uniform(-4.0, 4.0) * scale;
        px[k] = cx + rng.uniform(-4.0, 4.0) * scale;
        sig[k] = rng.uniform(2.5, 4.5) * scale;
      }
      for_each_pixel([&](int y, int x, double, double) {
        double f = 0.0;
        for (int k = 0; k < 3; ++k) {
          const double d2 = std::pow(y + 0.5 - py[k], 2) + std::pow(x + 0.5 - px[k], 2);
          f += std::exp(-d2 / (2.0 * sig[k] * sig[k]));
        }
        if (f > 0.5) c.at(y, x) = (classes > 2 && f > 1.0) ? 2 : 1;
      });
      break;
    }
    case ShapeFamily::checker: {
      const double half = rng.uniform(5.0, 10.0) * scale;
      const int cell = std::max(2, static_cast<int>(std::lround(4 * scale)));
      for_each_pixel([&](int y, int x, double dy, double dx) {
        if (std::abs(dy) > half || std::abs(dx) > half) return;
        const int a = static_cast<int>(std::floor((dy + half) / cell));
        const int b = static_cast<int>(std::floor((dx + half) / cell));
        if ((a + b) % 2 == 0) c.at(y, x) = 1;
        else if (classes > 2) c.at(y, x) = 2;
      });
      break;
    }
    case ShapeFamily::mixed:
      throw ConfigError("mixed family must be resolved per sample");
  }
}

Sample make_sample(const TaskSpec& spec, int index) {
  Rng rng(mix_seed(spec.seed, static_cast<std::uint64_t>(index)));
  ShapeFamily family = spec.shape_family;
  if (family == ShapeFamily::mixed) family = kConcreteFamilies[rng.below(5)];
  const int s = spec.image_size;
  Canvas canvas{s, std::vector<std::uint8_t>(static_cast<std::size_t>(s * s), 0)};
  draw_shape(family, spec.class_count, rng, canvas);

  // Smooth background gradient, class-dependent level, global shift, noise.
  const double gy = rng.uniform(-0.05, 0.05), gx = rng.uniform(-0.05, 0.05);
  Matrix<float> img(1, s * s);
  for (int y = 0; y < s; ++y) {
    for (int x = 0; x < s; ++x) {
      const int label = canvas.at(y, x);
      double v = kBackground + gy * (2.0 * y / s - 1.0) + gx * (2.0 * x / s - 1.0);
      v += kContrast * label / (spec.class_count - 1);
      v += spec.intensity_shift + spec.noise_sigma * rng.normal();
      img(0, y * s + x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  Sample out;
  out.image = Tensor<float>(Shape{1, s, s}, std::move(img));
  out.mask = std::move(canvas.labels);
  out.task_id = spec.task_id;
  out.index = index;
  return out;
}

}  // namespace

std::string to_string(ShapeFamily family) {
  switch (family) {
    case ShapeFamily::disk: return "disk";
    case ShapeFamily::ring: return "ring";
    case ShapeFamily::bar: return "bar";
    case ShapeFamily::blob: return "blob";
    case ShapeFamily::checker: return "checker";
    case ShapeFamily::mixed: return "mixed";
  }
  return "?";
}

ShapeFamily parse_shape_family(const std::string& name) {
  for (auto f : {ShapeFamily::disk, ShapeFamily::ring, ShapeFamily::bar, ShapeFamily::blob,
                 ShapeFamily::checker, ShapeFamily::mixed}) {
    if (to_string(f) == name) return f;
  }
  throw ConfigError("unknown shape family '" + name + "'");
}

void TaskSpec::validate() const {
  if (task_id.empty()) throw ConfigError("task_id must not be empty");
  if (class_count < 2 || class_count > 255) throw ConfigError(task_id + ": class_count must be in [2, 255]");
  if (n_train < 1 || n_test < 0) throw ConfigError(task_id + ": n_train must be >= 1 and n_test >= 0");
  if (noise_sigma < 0) throw ConfigError(task_id + ": noise_sigma must be >= 0");
  if (image_size < 4) throw ConfigError(task_id + ": image_size too small");
}

void to_json(nlohmann::json& j, const TaskSpec& spec) {
  j = nlohmann::json{{"task_id", spec.task_id},
                     {"class_count", spec.class_count},
                     {"shape_family", to_string(spec.shape_family)},
                     {"intensity_shift", spec.intensity_shift},
                     {"noise_sigma", spec.noise_sigma},
                     {"n_train", spec.n_train},
                     {"n_test", spec.n_test},
                     {"seed", spec.seed},
                     {"image_size", spec.image_size}};
}

void from_json(const nlohmann::json& j, TaskSpec& spec) {
  TaskSpec d;
  spec.task_id = j.value("task_id", d.task_id);
  spec.class_count = j.value("class_count", d.class_count);
  spec.shape_family = parse_shape_family(j.value("shape_family", to_string(d.shape_family)));
  spec.intensity_shift = j.value("intensity_shift", d.intensity_shift);
  spec.noise_sigma = j.value("noise_sigma", d.noise_sigma);
  spec.n_train = j.value("n_train", d.n_train);
  spec.n_test = j.value("n_test", d.n_test);
  spec.seed = j.value("seed", d.seed);
  spec.image_size = j.value("image_size", d.image_size);
}

const Sample& TaskDataset::by_index(int index) const {
  if (index >= 0 && index < static_cast<int>(train.size())) return train[index];
  const int t = index - static_cast<int>(train.size());
  if (t >= 0 && t < static_cast<int>(test.size())) return test[t];
  throw DataError(spec.task_id + ": no sample with index " + std::to_string(index));
}

TaskDataset generate_task(const TaskSpec& spec) {
  spec.validate();
  TaskDataset out;
  out.spec = spec;
  for (int i = 0; i < spec.n_train; ++i) out.train.push_back(make_sample(spec, i));
  for (int i = 0; i < spec.n_test; ++i) out.test.push_back(make_sample(spec, spec.n_train + i));
  return out;
}

namespace {

std::string sample_name(int index, const char* ext) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%05d.%s", index, ext);
  return buf;
}

}  // namespace

void save_dataset(const std::filesystem::path& dir, const TaskDataset& data) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["spec"] = data.spec;
  manifest["image_shape"] = {1, data.spec.image_size, data.spec.image_size};
  std::vector<int> train, test;
  auto write = [&](const Sample& s) {
    const auto& v = s.image.value();
    write_file(dir / sample_name(s.index, "img"),
               std::string_view(reinterpret_cast<const char*>(v.data()), sizeof(float) * v.size()));
    write_file(dir / sample_name(s.index, "msk"),
               std::string_view(reinterpret_cast<const char*>(s.mask.data()), s.mask.size()));
  };
  for (const auto& s : data.train) {
    train.push_back(s.index);
    write(s);
  }
  for (const auto& s : data.test) {
    test.push_back(s.index);
    write(s);
  }
  manifest["train"] = train;
  manifest["test"] = test;
  write_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

TaskDataset load_dataset(const std::filesystem::path& dir) {
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_file(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(dir.string() + "/manifest.json: " + e.what());
  }
  TaskDataset out;
  out.spec = manifest.at("spec").get<TaskSpec>();
  const int s = out.spec.image_size;
  auto read = [&](int index) {
    Sample smp;
    smp.task_id = out.spec.task_id;
    smp.index = index;
    const std::string img = read_file(dir / sample_name(index, "img"));
    const std::string msk = read_file(dir / sample_name(index, "msk"));
    if (img.size() != sizeof(float) * s * s || msk.size() != static_cast<std::size_t>(s * s)) {
      throw DataError(dir.string() + ": sample " + std::to_string(index) + " has the wrong size");
    }
    Matrix<float> v(1, s * s);
    std::memcpy(v.data(), img.data(), img.size());
    smp.image = Tensor<float>(Shape{1, s, s}, std::move(v));
    smp.mask.assign(msk.begin(), msk.end());
    for (auto label : smp.mask) {
      if (label >= out.spec.class_count) throw DataError(dir.string() + ": label out of range");
    }
    return smp;
  };
  for (int i : manifest.at("train").get<std::vector<int>>()) out.train.push_back(read(i));
  for (int i : manifest.at("test").get<std::vector<int>>()) out.test.push_back(read(i));
  return out;
}

std::vector<const Tensor<float>*> images_of(std::span<const Sample* const> samples) {
  std::vector<const Tensor<float>*> out;
  out.reserve(samples.size());
  for (const Sample* s : samples) out.push_back(&s->image);
  return out;
}

}  // namespace seqft
