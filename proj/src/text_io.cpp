#include "fsda/text_io.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "fsda/hashing.hpp"

namespace fsda {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void write_double(std::ostream& os, double v) { os << format_double(v); }

void write_vector(std::ostream& os, const Eigen::VectorXd& v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (i) os << ' ';
    write_double(os, v[i]);
  }
}

void write_matrix_rows(std::ostream& os, const Eigen::MatrixXd& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      if (c) os << ' ';
      write_double(os, m(r, c));
    }
    os << '\n';
  }
}

std::string read_token(std::istream& is, const std::string& field) {
  std::string tok;
  if (!(is >> tok)) {
    throw std::runtime_error("unexpected end of input while reading " + field);
  }
  return tok;
}

double read_double(std::istream& is, const std::string& field) {
  const std::string tok = read_token(is, field);
  try {
    std::size_t pos = 0;
    const double v = std::stod(tok, &pos);
    if (pos != tok.size()) throw std::invalid_argument(tok);
    return v;
  } catch (const std::exception&) {
    throw std::runtime_error("invalid number '" + tok + "' for " + field);
  }
}

long read_long(std::istream& is, const std::string& field) {
  const std::string tok = read_token(is, field);
  try {
    std::size_t pos = 0;
    const long v = std::stol(tok, &pos);
    if (pos != tok.size()) throw std::invalid_argument(tok);
    return v;
  } catch (const std::exception&) {
    throw std::runtime_error("invalid integer '" + tok + "' for " + field);
  }
}

std::uint64_t read_uint64(std::istream& is, const std::string& field) {
  const std::string tok = read_token(is, field);
  try {
    if (tok.empty() || tok[0] == '-') throw std::invalid_argument(tok);
    std::size_t pos = 0;
    const unsigned long long v = std::stoull(tok, &pos);
    if (pos != tok.size()) throw std::invalid_argument(tok);
    return static_cast<std::uint64_t>(v);
  } catch (const std::exception&) {
    throw std::runtime_error("invalid integer '" + tok + "' for " + field);
  }
}

void expect_token(std::istream& is, const std::string& expected,
                  const std::string& context) {
  const std::string tok = read_token(is, context);
  if (tok != expected) {
    throw std::runtime_error("expected '" + expected + "' but found '" + tok +
                             "' in " + context);
  }
}

Eigen::VectorXd read_vector(std::istream& is, int size,
                            const std::string& field) {
  Eigen::VectorXd v(size);
  for (int i = 0; i < size; ++i) v[i] = read_double(is, field);
  return v;
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open file: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_file_atomic(const std::string& path, const std::string& contents) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write file: " + tmp);
    f << contents;
  }
  std::filesystem::rename(tmp, path);
}

std::string hash_to_hex(std::uint64_t h) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace fsda
