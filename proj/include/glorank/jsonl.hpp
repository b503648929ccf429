#ifndef GLORANK_JSONL_HPP_
#define GLORANK_JSONL_HPP_

#include <fstream>
#include <functional>
#include <string>

#include <json.hpp>

#include "glorank/errors.hpp"

namespace glorank {

using json = nlohmann::json;

// Calls fn(line_number, parsed_object) for every non-empty line.
// Line numbers are 1-based and included in parse errors.
inline void read_jsonl(const std::string& path,
                       const std::function<void(int, const json&)>& fn) {
  std::ifstream in(path);
  if (!in) throw MissingInputError("cannot open file: " + path);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    fn(lineno, obj);
  }
}

class JsonlWriter {
 public:
  explicit JsonlWriter(const std::string& path) : out_(path) {
    if (!out_) throw Error("cannot open file for writing: " + path);
  }
  void write(const json& obj) { out_ << obj.dump() << "\n"; }
  void close() { out_.close(); }

 private:
  std::ofstream out_;
};

inline json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw MissingInputError("cannot open file: " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(path + ": " + e.what());
  }
}

inline void save_json_file(const std::string& path, const json& obj, int indent = 2) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open file for writing: " + path);
  out << obj.dump(indent) << "\n";
}

}  // namespace glorank

#endif  // GLORANK_JSONL_HPP_
