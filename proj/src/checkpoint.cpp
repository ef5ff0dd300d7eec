#include "cae/checkpoint.hpp"

#include <cstdio>
#include <set>
#include <sstream>

#include "byte_io.hpp"

namespace cae {

namespace {

const std::string kMagic = "CAE-CHECKPOINT";

std::string join(const std::vector<std::size_t>& v, char sep) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? std::string(1, sep) : "") + std::to_string(v[i]);
  return s;
}

std::vector<std::size_t> split_sizes(const std::string& s, char sep, const std::string& what) {
  std::vector<std::size_t> out;
  if (s.empty()) return out;
  std::stringstream in(s);
  std::string part;
  while (std::getline(in, part, sep)) {
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(part, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != part.size()) fail(ErrorKind::inconsistent, "checkpoint: bad " + what + " '" + s + "'");
    out.push_back(std::size_t(v));
  }
  return out;
}

std::string hex(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

struct Entry {
  std::string name;
  const Tensor<float>* tensor;
};

std::vector<Entry> entries_of(const Checkpoint& c) {
  std::vector<Entry> out;
  for (const auto& [name, t] : c.model.parameters) out.push_back({name, &t});
  for (const auto& [name, s] : c.model.batchnorm) {
    out.push_back({"bn." + name + ".running_mean", &s.running_mean});
    out.push_back({"bn." + name + ".running_var", &s.running_var});
  }
  if (c.optimizer) {
    for (const auto& [name, t] : c.optimizer->m) out.push_back({"adam.m." + name, &t});
    for (const auto& [name, t] : c.optimizer->v) out.push_back({"adam.v." + name, &t});
  }
  return out;
}

}  // namespace

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  const auto& d = c.model.descriptor;
  std::string h = kMagic + "\n";
  h += "version=" + std::to_string(kCheckpointVersion) + "\n";
  h += std::string("kind=") + to_string(d.kind) + "\n";
  h += "size=" + std::to_string(d.size) + "\n";
  h += "embedding=" + std::to_string(d.embedding) + "\n";
  h += "frame_embedding=" + std::to_string(d.frame_embedding) + "\n";
  h += "channels=" + join(d.channels, ',') + "\n";
  h += "frame_channels=" + join(d.frame_channels, ',') + "\n";
  h += "kernel=" + std::to_string(d.kernel) + "\n";
  for (const auto& [k, v] : c.metadata) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos)
      fail(ErrorKind::invalid_argument, "checkpoint metadata key/value contains '=' or newline: " + k);
    h += "meta." + k + "=" + v + "\n";
  }
  if (c.optimizer) {
    const auto& o = *c.optimizer;
    char buf[160];
    std::snprintf(buf, sizeof buf, "adam=%llu %.17g %.17g %.17g\n",
                  static_cast<unsigned long long>(o.step), o.beta1, o.beta2, o.epsilon);
    h += buf;
  }

  std::vector<unsigned char> payload;
  const auto entries = entries_of(c);
  h += "tensors=" + std::to_string(entries.size()) + "\n";
  for (const auto& e : entries) {
    h += "tensor=" + e.name + " " + join(e.tensor->shape(), 'x') + " " + std::to_string(payload.size()) +
         " " + std::to_string(e.tensor->size()) + "\n";
    for (float f : e.tensor->data()) bytes::append_le(payload, f);
  }
  h += "payload_bytes=" + std::to_string(payload.size()) + "\n";
  h += "payload_fnv1a=" + hex(bytes::fnv1a(payload.data(), payload.size())) + "\n";
  const auto* hb = reinterpret_cast<const unsigned char*>(h.data());
  h += "header_fnv1a=" + hex(bytes::fnv1a(hb, h.size())) + "\nend\n";

  std::vector<unsigned char> file(h.begin(), h.end());
  file.insert(file.end(), payload.begin(), payload.end());
  bytes::write_file(path, file);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto buf = bytes::read_file(path);
  const std::string name = path.string();
  const std::string text(buf.begin(), buf.end());

  std::size_t pos = 0;
  auto next_line = [&](bool required) -> std::optional<std::string> {
    const auto nl = text.find('\n', pos);
    if (nl == std::string::npos) {
      if (required) fail(ErrorKind::truncated, name + ": header ends early");
      return std::nullopt;
    }
    std::string line = text.substr(pos, nl - pos);
    pos = nl + 1;
    return line;
  };

  if (text.compare(0, kMagic.size() + 1, kMagic + "\n") != 0)
    fail(ErrorKind::bad_magic, name + ": not a checkpoint file");
  pos = kMagic.size() + 1;
  const auto version = *next_line(true);
  if (version != "version=" + std::to_string(kCheckpointVersion))
    fail(ErrorKind::version_mismatch, name + ": unsupported " + version + " (this build reads version=" +
                                          std::to_string(kCheckpointVersion) + ")");

  std::map<std::string, std::string> fields;
  std::map<std::string, std::string> metadata;
  std::vector<std::string> table;
  std::size_t header_end = 0, checksum_start = 0;
  std::string header_sum;
  while (true) {
    const std::size_t line_start = pos;
    const auto line = *next_line(true);
    if (line == "end") {
      header_end = pos;
      break;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail(ErrorKind::integrity, name + ": malformed header line '" + line + "'");
    const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    if (key == "header_fnv1a") {
      checksum_start = line_start;
      header_sum = value;
    } else if (key == "tensor") {
      table.push_back(value);
    } else if (key.rfind("meta.", 0) == 0) {
      metadata[key.substr(5)] = value;
    } else {
      fields[key] = value;
    }
  }
  if (header_sum.empty() ||
      hex(bytes::fnv1a(buf.data(), checksum_start)) != header_sum)
    fail(ErrorKind::integrity, name + ": header checksum mismatch");

  auto field = [&](const std::string& k) -> const std::string& {
    auto it = fields.find(k);
    if (it == fields.end()) fail(ErrorKind::inconsistent, name + ": header lacks " + k);
    return it->second;
  };
  auto one = [&](const std::string& k) {
    auto v = split_sizes(field(k), ',', k);
    if (v.size() != 1) fail(ErrorKind::inconsistent, name + ": bad " + k);
    return v[0];
  };

  Checkpoint c;
  auto& d = c.model.descriptor;
  try {
    d.kind = parse_model_kind(field("kind"));
  } catch (const Error&) {
    fail(ErrorKind::inconsistent, name + ": unknown model kind " + field("kind"));
  }
  d.size = one("size");
  d.embedding = one("embedding");
  d.frame_embedding = one("frame_embedding");
  d.channels = split_sizes(field("channels"), ',', "channels");
  d.frame_channels = split_sizes(field("frame_channels"), ',', "frame_channels");
  d.kernel = one("kernel");
  try {
    d.validate();
  } catch (const Error& e) {
    fail(ErrorKind::inconsistent, name + ": descriptor invalid: " + e.what());
  }
  c.metadata = metadata;

  const std::size_t payload_bytes = one("payload_bytes");
  if (buf.size() < header_end + payload_bytes)
    fail(ErrorKind::truncated, name + ": payload has " + std::to_string(buf.size() - header_end) +
                                   " bytes, table needs " + std::to_string(payload_bytes));
  if (buf.size() > header_end + payload_bytes)
    fail(ErrorKind::inconsistent, name + ": trailing bytes after payload");
  const unsigned char* payload = buf.data() + header_end;
  if (hex(bytes::fnv1a(payload, payload_bytes)) != field("payload_fnv1a"))
    fail(ErrorKind::integrity, name + ": payload checksum mismatch");
  if (one("tensors") != table.size()) fail(ErrorKind::inconsistent, name + ": tensor count mismatch");

  // Expected names and shapes come from the descriptor itself.
  const auto reference = build<float>(d, 0);
  std::map<std::string, Tensor<float>> loaded;
  for (const auto& row : table) {
    std::stringstream in(row);
    std::string tname, shape_s;
    std::size_t offset = 0, count = 0;
    if (!(in >> tname >> shape_s >> offset >> count))
      fail(ErrorKind::inconsistent, name + ": malformed tensor row '" + row + "'");
    Shape shape = split_sizes(shape_s, 'x', "shape");
    if (shape.empty() || element_count(shape) != count)
      fail(ErrorKind::inconsistent, name + ": tensor " + tname + " shape " + shape_s + " disagrees with count");
    if (offset + 4 * count > payload_bytes)
      fail(ErrorKind::truncated, name + ": tensor " + tname + " extends past the payload");
    Tensor<float> t(shape);
    for (std::size_t i = 0; i < count; ++i) t[i] = bytes::load<float>(payload + offset + 4 * i);
    if (!loaded.emplace(tname, std::move(t)).second)
      fail(ErrorKind::inconsistent, name + ": duplicate tensor " + tname);
  }

  auto take = [&](const std::string& key, const Shape& shape) {
    auto it = loaded.find(key);
    if (it == loaded.end()) fail(ErrorKind::inconsistent, name + ": missing tensor " + key);
    if (it->second.shape() != shape)
      fail(ErrorKind::inconsistent, name + ": tensor " + key + " is " + shape_string(it->second.shape()) +
                                        ", descriptor implies " + shape_string(shape));
    Tensor<float> t = std::move(it->second);
    loaded.erase(it);
    return t;
  };
  for (const auto& [pname, ref] : reference.parameters) c.model.parameters.emplace(pname, take(pname, ref.shape()));
  for (const auto& [bname, ref] : reference.batchnorm) {
    BatchNormState<float> s = ref;
    s.running_mean = take("bn." + bname + ".running_mean", ref.running_mean.shape());
    s.running_var = take("bn." + bname + ".running_var", ref.running_var.shape());
    c.model.batchnorm.emplace(bname, std::move(s));
  }
  if (fields.count("adam")) {
    AdamState o;
    unsigned long long step = 0;
    std::stringstream in(fields["adam"]);
    if (!(in >> step >> o.beta1 >> o.beta2 >> o.epsilon))
      fail(ErrorKind::inconsistent, name + ": malformed optimizer line");
    o.step = step;
    for (const auto& [pname, ref] : reference.parameters) {
      if (loaded.count("adam.m." + pname)) o.m.emplace(pname, take("adam.m." + pname, ref.shape()));
      if (loaded.count("adam.v." + pname)) o.v.emplace(pname, take("adam.v." + pname, ref.shape()));
    }
    c.optimizer = std::move(o);
  }
  if (!loaded.empty())
    fail(ErrorKind::inconsistent, name + ": unexpected tensor " + loaded.begin()->first);
  return c;
}

}  // namespace cae
