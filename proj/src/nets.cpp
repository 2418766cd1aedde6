#include "distillforge/nets.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "distillforge/errors.hpp"
#include "distillforge/random.hpp"

namespace distillforge {

namespace {

constexpr const char* kCheckpointMagic = "distillforge-checkpoint";
constexpr int kCheckpointVersion = 1;

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add_row_broadcast(matmul(x, w), b);
}

}  // namespace

// ---- NetworkSpec ----------------------------------------------------------

std::vector<std::size_t> NetworkSpec::divided_widths() const {
  std::vector<std::size_t> out;
  out.reserve(hidden_widths.size());
  for (auto w : hidden_widths) out.push_back((w + width_divisor - 1) / width_divisor);
  return out;
}

NetworkSpec NetworkSpec::with_divisor(std::size_t divisor) const {
  NetworkSpec s = *this;
  s.width_divisor = divisor;
  return s;
}

void NetworkSpec::validate() const {
  if (input_dim == 0) throw ParameterError("network spec: input_dim must be positive");
  if (embedding_dim == 0) throw ParameterError("network spec: embedding_dim must be positive");
  if (num_classes == 0) throw ParameterError("network spec: num_classes must be positive");
  if (width_divisor == 0) throw ParameterError("network spec: width_divisor must be positive");
  for (auto w : divided_widths()) {
    if (w == 0) throw ParameterError("network spec: zero hidden width after division");
  }
}

std::string to_string(const NetworkSpec& spec) {
  std::ostringstream os;
  os << spec.input_dim << " -> [";
  const auto widths = spec.divided_widths();
  for (std::size_t i = 0; i < widths.size(); ++i) os << (i ? "," : "") << widths[i];
  os << "] -> K" << spec.embedding_dim << " -> {" << spec.num_classes << " logits, "
     << spec.num_keypoint_coords << " coords} (divisor " << spec.width_divisor << ")";
  return os.str();
}

std::vector<Shape> parameter_shapes(const NetworkSpec& spec) {
  std::vector<Shape> shapes;
  std::size_t fan_in = spec.input_dim;
  for (auto w : spec.divided_widths()) {
    shapes.push_back({fan_in, w});
    shapes.push_back({1, w});
    fan_in = w;
  }
  shapes.push_back({fan_in, spec.embedding_dim});
  shapes.push_back({1, spec.embedding_dim});
  shapes.push_back({spec.embedding_dim, spec.num_classes});
  shapes.push_back({1, spec.num_classes});
  shapes.push_back({spec.embedding_dim, spec.num_keypoint_coords});
  shapes.push_back({1, spec.num_keypoint_coords});
  return shapes;
}

// ---- InputNormalizer ------------------------------------------------------

InputNormalizer InputNormalizer::identity(std::size_t dim) {
  return {std::vector<double>(dim, 0.0), std::vector<double>(dim, 1.0)};
}

InputNormalizer InputNormalizer::fit(const Tensor& features) {
  const std::size_t n = features.rows(), d = features.cols();
  if (n == 0) throw DataError("normalizer: no samples to fit");
  InputNormalizer out{std::vector<double>(d, 0.0), std::vector<double>(d, 0.0)};
  const auto x = features.data();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out.mean[c] += x[r * d + c];
  for (auto& m : out.mean) m /= static_cast<double>(n);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) {
      const double dev = x[r * d + c] - out.mean[c];
      out.stddev[c] += dev * dev;
    }
  for (auto& s : out.stddev) s = std::max(std::sqrt(s / static_cast<double>(n)), 1e-8);
  return out;
}

Tensor InputNormalizer::apply(const Tensor& batch) const {
  if (batch.rank() != 2 || batch.cols() != mean.size()) {
    throw DimensionError("normalizer: batch " + shape_to_string(batch.shape()) +
                         " does not have " + std::to_string(mean.size()) + " features");
  }
  const std::size_t n = batch.rows(), d = mean.size();
  std::vector<double> out(batch.data().begin(), batch.data().end());
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = (out[r * d + c] - mean[c]) / stddev[c];
  return Tensor({n, d}, std::move(out));
}

// ---- Network --------------------------------------------------------------

Network::Network(NetworkSpec spec, std::vector<Tensor> params, InputNormalizer normalizer)
    : spec_(std::move(spec)), params_(std::move(params)), normalizer_(std::move(normalizer)) {}

Network Network::build(const NetworkSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  const std::size_t relu_weights = spec.hidden_widths.size();
  std::vector<Tensor> params;
  for (const auto& shape : parameter_shapes(spec)) {
    if (params.size() % 2 == 1) {  // bias
      params.push_back(Tensor::zeros(shape, true));
      continue;
    }
    // Uniform, scaled by fan-in: gain 2 ahead of a ReLU, 1 for the linear K and heads.
    const double gain = params.size() / 2 < relu_weights ? 2.0 : 1.0;
    const double limit = std::sqrt(3.0 * gain / static_cast<double>(shape[0]));
    std::uniform_real_distribution<double> dist(-limit, limit);
    std::vector<double> values(shape_numel(shape));
    for (auto& v : values) v = dist(rng);
    params.emplace_back(shape, std::move(values), true);
  }
  return Network(spec, std::move(params), InputNormalizer::identity(spec.input_dim));
}

void Network::set_normalizer(InputNormalizer normalizer) {
  if (normalizer.mean.size() != spec_.input_dim || normalizer.stddev.size() != spec_.input_dim) {
    throw DimensionError("set_normalizer: dimension does not match input_dim " +
                         std::to_string(spec_.input_dim));
  }
  normalizer_ = std::move(normalizer);
}

std::size_t Network::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.numel();
  return n;
}

NetOutputs Network::run(const Tensor& batch, bool record) const {
  if (batch.rank() != 2 || batch.cols() != spec_.input_dim) {
    throw DimensionError("forward: batch " + shape_to_string(batch.shape()) +
                         " does not match input_dim " + std::to_string(spec_.input_dim));
  }
  auto param = [&](std::size_t i) { return record ? params_[i] : params_[i].detach(); };
  Tensor h = normalizer_.apply(batch);
  const std::size_t hidden = spec_.hidden_widths.size();
  for (std::size_t l = 0; l < hidden; ++l) h = relu(linear(h, param(2 * l), param(2 * l + 1)));
  NetOutputs out;
  out.embedding = linear(h, param(2 * hidden), param(2 * hidden + 1));
  out.logits = linear(out.embedding, param(2 * hidden + 2), param(2 * hidden + 3));
  out.regression = linear(out.embedding, param(2 * hidden + 4), param(2 * hidden + 5));
  return out;
}

NetOutputs Network::forward(const Tensor& batch) const { return run(batch, true); }
NetOutputs Network::infer(const Tensor& batch) const { return run(batch, false); }

Network Network::clone() const {
  std::vector<Tensor> params;
  params.reserve(params_.size());
  for (const auto& p : params_) params.push_back(p.clone());
  return Network(spec_, std::move(params), normalizer_);
}

void Network::clear_grads() {
  for (auto& p : params_) p.clear_grad();
}

void copy_parameters(const Network& src, Network& dst) {
  if (!(src.spec() == dst.spec())) {
    throw ContractError("copy_parameters: spec mismatch (" + to_string(src.spec()) + " vs " +
                        to_string(dst.spec()) + ")");
  }
  dst = src.clone();
}

// ---- checkpoints ----------------------------------------------------------

void save_checkpoint(const Network& net, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  const auto& s = net.spec();
  out << kCheckpointMagic << " v" << kCheckpointVersion << '\n';
  out << "input_dim " << s.input_dim << '\n';
  out << "hidden_widths " << s.hidden_widths.size();
  for (auto w : s.hidden_widths) out << ' ' << w;
  out << '\n';
  out << "embedding_dim " << s.embedding_dim << '\n';
  out << "num_classes " << s.num_classes << '\n';
  out << "num_keypoint_coords " << s.num_keypoint_coords << '\n';
  out << "width_divisor " << s.width_divisor << '\n';
  out << std::hexfloat;
  auto write_values = [&](const char* tag, std::span<const double> values) {
    out << tag;
    for (double v : values) out << ' ' << v;
    out << '\n';
  };
  write_values("mean", net.normalizer().mean);
  write_values("stddev", net.normalizer().stddev);
  out << "parameters " << std::dec << net.parameters().size() << '\n';
  for (const auto& p : net.parameters()) {
    out << std::dec << "tensor " << p.rows() << ' ' << p.cols() << '\n' << std::hexfloat;
    write_values("values", p.data());
  }
  if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

namespace {

class LineReader {
 public:
  explicit LineReader(std::istream& in) : in_(in) {}

  std::istringstream next(const std::string& expected_tag) {
    std::string line;
    if (!std::getline(in_, line)) {
      throw ParseError("unexpected end of file, expected '" + expected_tag + "'", line_ + 1);
    }
    ++line_;
    std::istringstream fields(line);
    std::string tag;
    fields >> tag;
    if (tag != expected_tag) {
      throw ParseError("expected '" + expected_tag + "', found '" + tag + "'", line_);
    }
    return fields;
  }

  std::size_t read_size(std::istringstream& fields) {
    long long v = -1;
    if (!(fields >> v) || v < 0) throw ParseError("expected a nonnegative integer", line_);
    return static_cast<std::size_t>(v);
  }

  std::vector<double> read_values(std::istringstream& fields, std::size_t count) {
    std::vector<double> values;
    values.reserve(count);
    std::string token;
    while (fields >> token) {
      char* end = nullptr;
      const double v = std::strtod(token.c_str(), &end);
      if (end == token.c_str() || *end != '\0') {
        throw ParseError("malformed number '" + token + "'", line_);
      }
      values.push_back(v);
    }
    if (values.size() != count) {
      throw ParseError("expected " + std::to_string(count) + " values, found " +
                       std::to_string(values.size()),
                       line_);
    }
    return values;
  }

  std::size_t line() const { return line_; }

 private:
  std::istream& in_;
  std::size_t line_ = 0;
};

}  // namespace

Network load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read checkpoint " + path.string());
  LineReader reader(in);

  auto header = reader.next(kCheckpointMagic);
  std::string version;
  header >> version;
  if (version != "v" + std::to_string(kCheckpointVersion)) {
    throw ParseError("unsupported checkpoint version '" + version + "'", 1);
  }

  NetworkSpec spec;
  {
    auto f = reader.next("input_dim");
    spec.input_dim = reader.read_size(f);
  }
  {
    auto f = reader.next("hidden_widths");
    const auto n = reader.read_size(f);
    spec.hidden_widths.clear();
    for (std::size_t i = 0; i < n; ++i) spec.hidden_widths.push_back(reader.read_size(f));
  }
  {
    auto f = reader.next("embedding_dim");
    spec.embedding_dim = reader.read_size(f);
  }
  {
    auto f = reader.next("num_classes");
    spec.num_classes = reader.read_size(f);
  }
  {
    auto f = reader.next("num_keypoint_coords");
    spec.num_keypoint_coords = reader.read_size(f);
  }
  {
    auto f = reader.next("width_divisor");
    spec.width_divisor = reader.read_size(f);
  }
  try {
    spec.validate();
  } catch (const ParameterError& e) {
    throw ParseError(e.what(), reader.line());
  }

  InputNormalizer normalizer;
  {
    auto f = reader.next("mean");
    normalizer.mean = reader.read_values(f, spec.input_dim);
  }
  {
    auto f = reader.next("stddev");
    normalizer.stddev = reader.read_values(f, spec.input_dim);
  }

  const auto shapes = parameter_shapes(spec);
  auto count_fields = reader.next("parameters");
  if (reader.read_size(count_fields) != shapes.size()) {
    throw ParseError("parameter count does not match the network layout", reader.line());
  }
  std::vector<Tensor> params;
  for (const auto& shape : shapes) {
    auto f = reader.next("tensor");
    const auto r = reader.read_size(f);
    const auto c = reader.read_size(f);
    if (Shape{r, c} != shape) {
      throw ParseError("tensor shape " + shape_to_string({r, c}) + " does not match expected " +
                       shape_to_string(shape),
                       reader.line());
    }
    auto v = reader.next("values");
    params.emplace_back(shape, reader.read_values(v, r * c), true);
  }
  return Network(spec, std::move(params), std::move(normalizer));
}

}  // namespace distillforge
