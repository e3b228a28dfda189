#pragma once

#include <algorithm>
#include <atomic>
#include <deque>
#include <exception>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <variant>
#include <vector>

#include <json.hpp>

#include "theorylab/error.hpp"
#include "theorylab/svg.hpp"
#include "theorylab/trainer.hpp"

namespace theorylab {

/// One CSV cell. Reals are written with format_double (%.17g).
class Cell {
 public:
  Cell(double v) : text_(format_double(v)) {}
  Cell(int v) : text_(std::to_string(v)) {}
  Cell(long v) : text_(std::to_string(v)) {}
  Cell(unsigned v) : text_(std::to_string(v)) {}
  Cell(unsigned long v) : text_(std::to_string(v)) {}
  Cell(unsigned long long v) : text_(std::to_string(v)) {}
  Cell(bool v) : text_(v ? "true" : "false") {}
  Cell(std::string v) : text_(std::move(v)) {}
  Cell(const char* v) : text_(v) {}

  const std::string& text() const noexcept { return text_; }

 private:
  std::string text_;
};

struct Table {
  std::string name;
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;

  void add(std::initializer_list<Cell> cells) { add(std::vector<Cell>(cells)); }
  void add(const std::vector<Cell>& cells) {
    require(cells.size() == columns.size(), error_kind::invalid_argument,
            "row width does not match table '" + name + "'");
    std::vector<std::string> row;
    for (const auto& c : cells) row.push_back(c.text());
    rows.push_back(std::move(row));
  }
};

struct Check {
  std::string name;
  bool pass = false;
  bool asserted = true;
  nlohmann::json values = nlohmann::json::object();
};

struct Summary {
  std::string experiment;
  std::deque<Table> tables;  // deque: table() hands out stable references
  std::vector<Chart> charts;
  std::deque<Check> checks;
  std::vector<std::pair<std::string, RunRecord>> runs;  // cell key -> trainer record
  std::size_t censored = 0;
  std::size_t failed_cells = 0;
  std::vector<std::string> notes;

  Table& table(const std::string& name, std::vector<std::string> columns) {
    tables.push_back({name, std::move(columns), {}});
    return tables.back();
  }
  Check& check(const std::string& name, bool pass, bool asserted, nlohmann::json values = nlohmann::json::object()) {
    checks.push_back({name, pass, asserted, std::move(values)});
    return checks.back();
  }
  bool passed() const {
    return failed_cells == 0 &&
           std::all_of(checks.begin(), checks.end(), [](const Check& c) { return !c.asserted || c.pass; });
  }
};

inline nlohmann::json verdict_json(const Summary& s) {
  nlohmann::json checks = nlohmann::json::array();
  for (const auto& c : s.checks) {
    checks.push_back({{"name", c.name}, {"pass", c.pass}, {"asserted", c.asserted}, {"values", c.values}});
  }
  return {{"experiment", s.experiment}, {"pass", s.passed()},         {"checks", checks},
          {"censored", s.censored},     {"failed_cells", s.failed_cells}, {"notes", s.notes}};
}

namespace detail {

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), error_kind::io, "cannot open " + path.string() + " for writing");
  out << text;
  out.close();
  require(!out.fail(), error_kind::io, "failed writing " + path.string());
}

inline std::string table_csv(const Table& t) {
  std::string out;
  for (std::size_t i = 0; i < t.columns.size(); ++i) out += (i ? "," : "") + csv_field(t.columns[i]);
  out += "\n";
  for (const auto& row : t.rows) {
    for (std::size_t i = 0; i < row.size(); ++i) out += (i ? "," : "") + csv_field(row[i]);
    out += "\n";
  }
  return out;
}

}  // namespace detail

/// Experiment summary CSV: one row per check.
inline Table checks_table(const Summary& s) {
  Table t{"summary", {"check", "asserted", "pass", "values"}, {}};
  for (const auto& c : s.checks) t.add({c.name, c.asserted, c.pass, c.values.dump()});
  return t;
}

/// Writes <experiment>_<name>.csv for the summary, every table and every run
/// record, <experiment>_<chart>.svg for drawable charts, and verdict.json.
/// Returns the written paths in write order.
inline std::vector<std::filesystem::path> emit(const Summary& s, const std::filesystem::path& dir,
                                               const std::vector<std::string>& formats = {"csv", "svg"}) {
  for (const auto& f : formats) {
    require(f == "csv" || f == "svg", error_kind::invalid_argument, "unknown output format '" + f + "'");
  }
  const bool csv = std::find(formats.begin(), formats.end(), "csv") != formats.end();
  const bool svg = std::find(formats.begin(), formats.end(), "svg") != formats.end();
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  require(!ec && std::filesystem::is_directory(dir), error_kind::io, "cannot create output directory " + dir.string());

  std::vector<std::filesystem::path> written;
  auto put = [&](const std::string& stem, const std::string& ext, const std::string& text) {
    const auto path = dir / (s.experiment + "_" + stem + "." + ext);
    detail::write_text(path, text);
    written.push_back(path);
  };
  if (csv) {
    put("summary", "csv", detail::table_csv(checks_table(s)));
    for (const auto& t : s.tables) put(t.name, "csv", detail::table_csv(t));
    for (const auto& [key, record] : s.runs) {
      std::ostringstream out;
      write_csv(out, record);
      put(key, "csv", out.str());
    }
  }
  if (svg) {
    for (const auto& c : s.charts) {
      if (c.drawable()) put(c.name, "svg", render_svg(c));
    }
  }
  const auto verdict = dir / "verdict.json";
  detail::write_text(verdict, verdict_json(s).dump(2) + "\n");
  written.push_back(verdict);
  return written;
}

template <class T>
struct Outcome {
  std::optional<T> value;
  std::string error;
};

/// Evaluate fn(0..n-1) on up to `threads` workers. Results are placed by index,
/// so output never depends on the schedule. Exceptions are captured per cell.
template <class F>
auto parallel_map(std::size_t n, unsigned threads, F fn) -> std::vector<Outcome<decltype(fn(std::size_t{}))>> {
  using T = decltype(fn(std::size_t{}));
  std::vector<Outcome<T>> out(n);
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, std::max<std::size_t>(n, 1)));
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        out[i].value.emplace(fn(i));
      } catch (const std::exception& e) {
        out[i].error = e.what();
      }
    }
  };
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned k = 0; k < threads; ++k) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  return out;
}

}  // namespace theorylab
