#include "bwcache/traceio.hpp"

#include <bit>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "json.hpp"

namespace bwcache {

namespace {

using json = nlohmann::json;

std::ofstream open_for_write(const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  return os;
}

void finish_write(std::ofstream& os, const std::filesystem::path& path) {
  os.flush();
  if (!os) throw std::runtime_error("write failed for " + path.string());
}

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    out.push_back(line.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

template <typename T>
T parse_number(const std::string& field, int line_no, const char* what) {
  T value{};
  const char* first = field.data();
  const char* last = field.data() + field.size();
  const auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc() || ptr != last) {
    throw FormatError("line " + std::to_string(line_no) + ": bad " + what + " '" + field + "'");
  }
  return value;
}

std::string strip_cr(std::string line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return line;
}

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

void put_u64(std::vector<unsigned char>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

std::uint64_t get_le(const std::vector<unsigned char>& in, std::size_t& pos, int bytes) {
  if (pos + static_cast<std::size_t>(bytes) > in.size()) throw FormatError("latent dump truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(in[pos + i]) << (8 * i);
  pos += static_cast<std::size_t>(bytes);
  return v;
}

double require_rate(double v, const char* key) {
  if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument(std::string(key) + " outside [0, 1]");
  return v;
}

}  // namespace

std::string format_real(double value) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", value);
  return buf;
}

void write_heatmap(const RunTrace& trace, std::ostream& os) {
  os << "step,block,l1_rel\n";
  for (const auto& d : trace.decisions) {
    for (int b = 0; b < trace.n_blocks; ++b) {
      os << d.step << ',' << b << ',';
      if (d.per_block_l1) os << format_real((*d.per_block_l1)[static_cast<std::size_t>(b)]);
      os << '\n';
    }
  }
}

void export_heatmap(const RunTrace& trace, const std::filesystem::path& path) {
  auto os = open_for_write(path);
  write_heatmap(trace, os);
  finish_write(os, path);
}

DistanceTrace read_distance_trace(std::istream& is) {
  std::string line;
  int line_no = 1;
  if (!std::getline(is, line) || strip_cr(line) != "step,block,l1_rel") {
    throw FormatError("line 1: expected header 'step,block,l1_rel'");
  }

  DistanceTrace trace;
  // Rows of the step currently being assembled.
  std::vector<std::optional<double>> pending;
  std::optional<int> pending_step;
  int pending_line = 0;

  auto flush = [&]() {
    if (!pending_step) return;
    const int n = static_cast<int>(pending.size());
    if (trace.n_blocks == 0) trace.n_blocks = n;
    if (n != trace.n_blocks) {
      throw FormatError("line " + std::to_string(pending_line) + ": ragged trace, step " +
                        std::to_string(*pending_step) + " has " + std::to_string(n) + " blocks, expected " +
                        std::to_string(trace.n_blocks));
    }
    std::size_t present = 0;
    for (const auto& v : pending) present += v ? 1 : 0;
    if (present != 0 && present != pending.size()) {
      throw FormatError("line " + std::to_string(pending_line) + ": step " + std::to_string(*pending_step) +
                        " mixes empty and non-empty distances");
    }
    trace.steps.push_back(*pending_step);
    if (present == 0) {
      trace.rows.emplace_back(std::nullopt);
    } else {
      std::vector<double> values;
      values.reserve(pending.size());
      for (const auto& v : pending) values.push_back(*v);
      trace.rows.emplace_back(std::move(values));
    }
    pending.clear();
  };

  while (std::getline(is, line)) {
    ++line_no;
    line = strip_cr(line);
    if (line.empty()) continue;
    const auto fields = split_fields(line);
    if (fields.size() != 3) {
      throw FormatError("line " + std::to_string(line_no) + ": expected 3 fields, got " +
                        std::to_string(fields.size()));
    }
    const int step = parse_number<int>(fields[0], line_no, "step");
    const int block = parse_number<int>(fields[1], line_no, "block");
    if (!pending_step || *pending_step != step) {
      flush();
      for (int s : trace.steps) {
        if (s == step) throw FormatError("line " + std::to_string(line_no) + ": step " + std::to_string(step) +
                                         " appears in two separate runs of rows");
      }
      pending_step = step;
    }
    pending_line = line_no;
    if (block != static_cast<int>(pending.size())) {
      throw FormatError("line " + std::to_string(line_no) + ": expected block " + std::to_string(pending.size()) +
                        ", got " + std::to_string(block));
    }
    if (fields[2].empty()) {
      pending.emplace_back(std::nullopt);
    } else {
      const double v = parse_number<double>(fields[2], line_no, "l1_rel");
      if (!(v >= 0.0) || !std::isfinite(v)) {
        throw FormatError("line " + std::to_string(line_no) + ": l1_rel must be finite and >= 0");
      }
      pending.emplace_back(v);
    }
  }
  flush();
  return trace;
}

DistanceTrace load_distance_trace(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open trace " + path.string());
  return read_distance_trace(is);
}

void write_reuse_profile(const std::vector<StepDecision>& decisions, std::ostream& os) {
  os << "step,reused\n";
  int reused = 0;
  for (const auto& d : decisions) {
    const bool r = d.action == Action::reused;
    reused += r ? 1 : 0;
    os << d.step << ',' << (r ? 1 : 0) << '\n';
  }
  const double mean = decisions.empty() ? 0.0 : static_cast<double>(reused) / decisions.size();
  os << "mean," << format_real(mean) << '\n';
}

void export_reuse_profile(const RunTrace& trace, const std::filesystem::path& path) {
  auto os = open_for_write(path);
  write_reuse_profile(trace.decisions, os);
  finish_write(os, path);
}

void write_decisions(const std::vector<StepDecision>& decisions, std::ostream& os) {
  os << "step,action,mean_l1\n";
  for (const auto& d : decisions) {
    os << d.step << ',' << to_string(d.action) << ',';
    if (d.mean_l1) os << format_real(*d.mean_l1);
    os << '\n';
  }
}

void export_decisions(const std::vector<StepDecision>& decisions, const std::filesystem::path& path) {
  auto os = open_for_write(path);
  write_decisions(decisions, os);
  finish_write(os, path);
}

std::string summary_json(const RunSummary& s) {
  json j;
  j["reuse_rate_blocks"] = require_rate(s.reuse_rate_blocks, "reuse_rate_blocks");
  j["reuse_rate_steps"] = require_rate(s.reuse_rate_steps, "reuse_rate_steps");
  j["total_flops"] = s.total_flops;
  j["flops_saved"] = s.flops_saved;
  j["wall_seconds"] = s.wall_seconds;
  if (!s.psnr_db) {
    j["psnr_db"] = nullptr;
  } else if (std::isinf(*s.psnr_db) && *s.psnr_db > 0) {
    j["psnr_db"] = "inf";
  } else {
    j["psnr_db"] = *s.psnr_db;
  }
  j["ssim"] = s.ssim ? json(*s.ssim) : json(nullptr);
  return j.dump(2) + "\n";
}

void export_summary(const RunSummary& summary, const std::filesystem::path& path) {
  write_text_file(path, summary_json(summary));
}

RunSummary parse_summary(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("summary is not valid JSON: ") + e.what());
  }
  try {
    RunSummary s;
    s.reuse_rate_blocks = require_rate(j.at("reuse_rate_blocks").get<double>(), "reuse_rate_blocks");
    s.reuse_rate_steps = require_rate(j.at("reuse_rate_steps").get<double>(), "reuse_rate_steps");
    s.total_flops = j.at("total_flops").get<std::uint64_t>();
    s.flops_saved = j.at("flops_saved").get<std::uint64_t>();
    s.wall_seconds = j.at("wall_seconds").get<double>();
    const auto& p = j.at("psnr_db");
    if (p.is_string()) {
      if (p.get<std::string>() != "inf") throw FormatError("psnr_db string must be \"inf\"");
      s.psnr_db = kPsnrIdentical;
    } else if (!p.is_null()) {
      s.psnr_db = p.get<double>();
    }
    if (!j.at("ssim").is_null()) s.ssim = j.at("ssim").get<double>();
    return s;
  } catch (const json::exception& e) {
    throw FormatError(std::string("summary field error: ") + e.what());
  }
}

template <typename Scalar>
std::vector<unsigned char> encode_latent(const Tensor<Scalar>& tensor) {
  static_assert(sizeof(Scalar) == 4 || sizeof(Scalar) == 8);
  using Bits = std::conditional_t<sizeof(Scalar) == 4, std::uint32_t, std::uint64_t>;
  std::vector<unsigned char> out{'B', 'W', 'L', 'T'};
  put_u32(out, 1);
  put_u32(out, sizeof(Scalar));
  put_u32(out, static_cast<std::uint32_t>(tensor.rank()));
  for (Index d : tensor.shape()) put_u64(out, static_cast<std::uint64_t>(d));
  out.reserve(out.size() + static_cast<std::size_t>(tensor.size()) * sizeof(Scalar));
  for (Scalar v : tensor.values()) {
    const auto bits = std::bit_cast<Bits>(v);
    for (std::size_t i = 0; i < sizeof(Scalar); ++i) out.push_back(static_cast<unsigned char>(bits >> (8 * i)));
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> decode_latent_dump(const std::vector<unsigned char>& bytes) {
  using Bits = std::conditional_t<sizeof(Scalar) == 4, std::uint32_t, std::uint64_t>;
  if (bytes.size() < 16 || std::memcmp(bytes.data(), "BWLT", 4) != 0) throw FormatError("not a latent dump");
  std::size_t pos = 4;
  if (get_le(bytes, pos, 4) != 1) throw FormatError("unsupported latent dump version");
  if (get_le(bytes, pos, 4) != sizeof(Scalar)) throw FormatError("latent dump scalar width mismatch");
  const auto rank = get_le(bytes, pos, 4);
  Shape shape;
  for (std::uint64_t i = 0; i < rank; ++i) shape.push_back(static_cast<Index>(get_le(bytes, pos, 8)));
  const Index n = shape_size(shape);
  Vector<Scalar> data(n);
  for (Index i = 0; i < n; ++i) data[i] = std::bit_cast<Scalar>(static_cast<Bits>(get_le(bytes, pos, sizeof(Scalar))));
  if (pos != bytes.size()) throw FormatError("trailing bytes after latent dump");
  return Tensor<Scalar>(std::move(shape), std::move(data));
}

template <typename Scalar>
void dump_latent(const Tensor<Scalar>& tensor, const std::filesystem::path& path) {
  const auto bytes = encode_latent(tensor);
  auto os = open_for_write(path);
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  finish_write(os, path);
}

std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  auto os = open_for_write(path);
  os << text;
  finish_write(os, path);
}

template std::vector<unsigned char> encode_latent<float>(const Tensor<float>&);
template std::vector<unsigned char> encode_latent<double>(const Tensor<double>&);
template Tensor<float> decode_latent_dump<float>(const std::vector<unsigned char>&);
template Tensor<double> decode_latent_dump<double>(const std::vector<unsigned char>&);
template void dump_latent<float>(const Tensor<float>&, const std::filesystem::path&);
template void dump_latent<double>(const Tensor<double>&, const std::filesystem::path&);

}  // namespace bwcache
