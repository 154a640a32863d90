#include "speechrl/config.hpp"

#include <cctype>
#include <charconv>
#include <cmath>
#include <sstream>

#include "speechrl/common.hpp"

namespace speechrl {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

bool valid_key(std::string_view k) {
  if (k.empty()) return false;
  for (char c : k)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.')) return false;
  return k.front() != '.' && k.back() != '.';
}

class ValueParser {
 public:
  ValueParser(std::string_view s, int line) : s_(s), line_(line) {}

  ConfigValue parse_all() {
    ConfigValue v = parse_value();
    skip_ws();
    if (pos_ != s_.size()) fail("trailing characters after value");
    return v;
  }

 private:
  [[noreturn]] void fail(const std::string& what) const {
    throw ConfigError("config line " + std::to_string(line_) + ": " + what);
  }

  void skip_ws() {
    while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) ++pos_;
  }

  ConfigValue parse_value() {
    skip_ws();
    if (pos_ >= s_.size()) fail("missing value");
    const char c = s_[pos_];
    if (c == '"') return parse_string();
    if (c == '[') return parse_array();
    return parse_scalar();
  }

  ConfigValue parse_string() {
    ConfigValue v;
    v.kind = ConfigValue::Kind::kString;
    ++pos_;
    while (pos_ < s_.size() && s_[pos_] != '"') {
      char c = s_[pos_++];
      if (c == '\\') {
        if (pos_ >= s_.size()) fail("unterminated escape");
        const char e = s_[pos_++];
        switch (e) {
          case 'n': c = '\n'; break;
          case 't': c = '\t'; break;
          case '"': c = '"'; break;
          case '\\': c = '\\'; break;
          default: fail(std::string("unsupported escape \\") + e);
        }
      }
      v.text += c;
    }
    if (pos_ >= s_.size()) fail("unterminated string");
    ++pos_;
    return v;
  }

  ConfigValue parse_array() {
    ConfigValue v;
    v.kind = ConfigValue::Kind::kArray;
    ++pos_;
    skip_ws();
    if (pos_ < s_.size() && s_[pos_] == ']') {
      ++pos_;
      return v;
    }
    while (true) {
      ConfigValue item = parse_value();
      if (item.kind == ConfigValue::Kind::kArray) fail("nested arrays are not supported");
      v.items.push_back(std::move(item));
      skip_ws();
      if (pos_ >= s_.size()) fail("unterminated array");
      if (s_[pos_] == ',') {
        ++pos_;
        skip_ws();
        if (pos_ < s_.size() && s_[pos_] == ']') {
          ++pos_;
          return v;
        }
        continue;
      }
      if (s_[pos_] == ']') {
        ++pos_;
        return v;
      }
      fail("expected ',' or ']' in array");
    }
  }

  ConfigValue parse_scalar() {
    const std::size_t start = pos_;
    while (pos_ < s_.size() && s_[pos_] != ',' && s_[pos_] != ']' && !std::isspace(static_cast<unsigned char>(s_[pos_])))
      ++pos_;
    std::string tok(s_.substr(start, pos_ - start));
    ConfigValue v;
    v.text = tok;
    if (tok == "true" || tok == "false") {
      v.kind = ConfigValue::Kind::kBool;
      v.b = tok == "true";
      return v;
    }
    std::string digits;
    for (char c : tok)
      if (c != '_') digits += c;
    const bool is_float = digits.find_first_of(".eE") != std::string::npos || digits == "inf" || digits == "nan";
    if (!is_float) {
      std::int64_t x = 0;
      const char* b = digits.data();
      const char* e = b + digits.size();
      if (!digits.empty() && *b == '+') ++b;
      auto [p, ec] = std::from_chars(b, e, x);
      if (ec == std::errc() && p == e && b != e) {
        v.kind = ConfigValue::Kind::kInt;
        v.i = x;
        v.f = static_cast<double>(x);
        return v;
      }
      fail("cannot parse value '" + tok + "'");
    }
    try {
      std::size_t used = 0;
      v.f = std::stod(digits, &used);
      if (used != digits.size()) fail("cannot parse number '" + tok + "'");
    } catch (const std::logic_error&) {
      fail("cannot parse number '" + tok + "'");
    }
    v.kind = ConfigValue::Kind::kFloat;
    return v;
  }

  std::string_view s_;
  int line_;
  std::size_t pos_ = 0;
};

// Drops a trailing # comment that is not inside a string.
std::string_view strip_comment(std::string_view line) {
  bool in_str = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '\\' && in_str) {
      ++i;
      continue;
    }
    if (line[i] == '"') in_str = !in_str;
    if (line[i] == '#' && !in_str) return line.substr(0, i);
  }
  return line;
}

std::string format_double(double x) {
  std::ostringstream os;
  os.precision(17);
  os << x;
  return os.str();
}

}  // namespace

std::string ConfigValue::canonical() const {
  switch (kind) {
    case Kind::kString: {
      std::string out = "\"";
      for (char c : text) {
        if (c == '"' || c == '\\') out += '\\';
        out += c;
      }
      return out + "\"";
    }
    case Kind::kInt: return std::to_string(i);
    case Kind::kFloat: return format_double(f);
    case Kind::kBool: return b ? "true" : "false";
    case Kind::kArray: {
      std::string out = "[";
      for (std::size_t n = 0; n < items.size(); ++n) out += (n ? ", " : "") + items[n].canonical();
      return out + "]";
    }
  }
  return {};
}

Config Config::parse(std::string_view text) {
  Config cfg;
  std::string section;
  int line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    ++line_no;
    const auto line = trim(strip_comment(text.substr(start, end - start)));
    start = end + 1;
    if (line.empty()) {
      if (end == text.size()) break;
      continue;
    }
    if (line.front() == '[') {
      if (line.back() != ']' || line.size() < 3) throw ConfigError("config line " + std::to_string(line_no) + ": bad section header");
      section = std::string(trim(line.substr(1, line.size() - 2)));
      if (!valid_key(section)) throw ConfigError("config line " + std::to_string(line_no) + ": bad section name");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    const auto key = trim(line.substr(0, eq));
    if (!valid_key(key)) throw ConfigError("config line " + std::to_string(line_no) + ": bad key '" + std::string(key) + "'");
    const std::string full = section.empty() ? std::string(key) : section + "." + std::string(key);
    if (cfg.values_.count(full)) throw ConfigError("config line " + std::to_string(line_no) + ": duplicate key " + full);
    cfg.values_[full] = ValueParser(line.substr(eq + 1), line_no).parse_all();
    if (end == text.size()) break;
  }
  return cfg;
}

Config Config::load(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_text_file(path.string());
  } catch (const Error& e) {
    throw ConfigError(std::string("cannot read config: ") + e.what());
  }
  return parse(text);
}

void Config::set_u64(const std::string& key, std::uint64_t v) {
  ConfigValue cv;
  cv.kind = ConfigValue::Kind::kInt;
  cv.i = static_cast<std::int64_t>(v);
  cv.f = static_cast<double>(v);
  cv.text = std::to_string(v);
  values_[key] = cv;
}

const ConfigValue* Config::find(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) return nullptr;
  used_.insert(key);
  return &it->second;
}

std::string Config::get_string(const std::string& key, const std::string& fallback) const {
  const auto* v = find(key);
  if (!v) return fallback;
  if (v->kind != ConfigValue::Kind::kString) throw ConfigError(key + " must be a string");
  return v->text;
}

std::int64_t Config::get_int(const std::string& key, std::int64_t fallback) const {
  const auto* v = find(key);
  if (!v) return fallback;
  if (v->kind != ConfigValue::Kind::kInt) throw ConfigError(key + " must be an integer");
  return v->i;
}

std::uint64_t Config::get_u64(const std::string& key, std::uint64_t fallback) const {
  const auto* v = find(key);
  if (!v) return fallback;
  if (v->kind != ConfigValue::Kind::kInt || v->i < 0) throw ConfigError(key + " must be a non-negative integer");
  return static_cast<std::uint64_t>(v->i);
}

double Config::get_double(const std::string& key, double fallback) const {
  const auto* v = find(key);
  if (!v) return fallback;
  if (v->kind != ConfigValue::Kind::kFloat && v->kind != ConfigValue::Kind::kInt) throw ConfigError(key + " must be a number");
  if (!std::isfinite(v->f)) throw ConfigError(key + " must be finite");
  return v->f;
}

bool Config::get_bool(const std::string& key, bool fallback) const {
  const auto* v = find(key);
  if (!v) return fallback;
  if (v->kind != ConfigValue::Kind::kBool) throw ConfigError(key + " must be true or false");
  return v->b;
}

std::vector<double> Config::get_doubles(const std::string& key, const std::vector<double>& fallback) const {
  const auto* v = find(key);
  if (!v) return fallback;
  if (v->kind != ConfigValue::Kind::kArray) throw ConfigError(key + " must be an array of numbers");
  std::vector<double> out;
  for (const auto& it : v->items) {
    if (it.kind != ConfigValue::Kind::kFloat && it.kind != ConfigValue::Kind::kInt) throw ConfigError(key + " must be an array of numbers");
    out.push_back(it.f);
  }
  return out;
}

void Config::check_all_used() const {
  for (const auto& [k, v] : values_)
    if (!used_.count(k)) throw ConfigError("unknown config key: " + k);
}

std::string Config::canonical() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + " = " + v.canonical() + "\n";
  return out;
}

}  // namespace speechrl
