#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>

namespace fsda {

// Round-trip-exact double formatting (17 significant digits).
std::string format_double(double v);

void write_double(std::ostream& os, double v);
void write_vector(std::ostream& os, const Eigen::VectorXd& v);
void write_matrix_rows(std::ostream& os, const Eigen::MatrixXd& m);

// Token-level readers that throw std::runtime_error with a field name on
// malformed input.
std::string read_token(std::istream& is, const std::string& field);
double read_double(std::istream& is, const std::string& field);
long read_long(std::istream& is, const std::string& field);
// Seeds and hashes use the full unsigned 64-bit range.
std::uint64_t read_uint64(std::istream& is, const std::string& field);
void expect_token(std::istream& is, const std::string& expected,
                  const std::string& context);
Eigen::VectorXd read_vector(std::istream& is, int size,
                            const std::string& field);

std::string read_file(const std::string& path);
void write_file_atomic(const std::string& path, const std::string& contents);

}  // namespace fsda
