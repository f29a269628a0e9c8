/*
 * Copyright (c) 2026, The psh3d Authors.  All rights reserved.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

// CSV forms of feature matrices and bucket assignments.
//   features:   header f0,...,f{d-1}; one row per point
//   assignment: header point,bucket_id,bucket_offset,dest_index

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "psh3d/error.hpp"
#include "psh3d/geometry.hpp"
#include "psh3d/matrix.hpp"
#include "psh3d/psh.hpp"

namespace psh3d {

namespace detail {

inline std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t pos = 0;
  for (;;) {
    auto comma = line.find(',', pos);
    out.push_back(trim(line.substr(pos, comma == std::string_view::npos ? std::string_view::npos : comma - pos)));
    if (comma == std::string_view::npos) break;
    pos = comma + 1;
  }
  return out;
}

template <typename Fn>
void for_each_line(std::string_view text, Fn&& fn) {
  std::size_t pos = 0, line_no = 0;
  while (pos < text.size()) {
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    auto line = trim(text.substr(pos, nl - pos));
    pos = nl + 1;
    ++line_no;
    if (!line.empty()) fn(line, line_no);
  }
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot write '" + path + "'");
  out << text;
}

}  // namespace detail

inline std::string format_matrix_csv(const MatrixD& m) {
  std::string out;
  for (std::size_t c = 0; c < m.cols(); ++c) {
    if (c) out.push_back(',');
    out += "f" + std::to_string(c);
  }
  out.push_back('\n');
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c) out.push_back(',');
      detail::append_double(out, row[c]);
    }
    out.push_back('\n');
  }
  return out;
}

inline MatrixD parse_matrix_csv(std::string_view text) {
  std::vector<double> values;
  std::size_t cols = 0, rows = 0;
  bool header = true;
  detail::for_each_line(text, [&](std::string_view line, std::size_t line_no) {
    auto fields = detail::split_csv(line);
    if (header) {
      header = false;
      cols = fields.size();
      double v;
      if (std::all_of(fields.begin(), fields.end(), [&](auto f) { return detail::parse_number(f, v); }))
        throw ParseError("expected a header row, got numbers", line_no);
      return;
    }
    if (fields.size() != cols)
      throw ParseError("expected " + std::to_string(cols) + " columns, got " + std::to_string(fields.size()), line_no);
    for (auto f : fields) {
      double v;
      if (!detail::parse_number(f, v)) throw ParseError("bad number '" + std::string(f) + "'", line_no);
      values.push_back(v);
    }
    ++rows;
  });
  if (rows == 0) throw EmptyInputError("feature CSV has no rows");
  MatrixD m(rows, cols);
  std::copy(values.begin(), values.end(), m.values().begin());
  return m;
}

inline MatrixD load_matrix_csv(const std::string& path) { return parse_matrix_csv(detail::read_file(path)); }
inline void write_matrix_csv(const std::string& path, const MatrixD& m) {
  detail::write_text(path, format_matrix_csv(m));
}

inline constexpr std::string_view kAssignmentHeader = "point,bucket_id,bucket_offset,dest_index";

inline std::string format_assignment_csv(const BucketAssignment& a) {
  std::string out(kAssignmentHeader);
  out.push_back('\n');
  for (std::size_t i = 0; i < a.size(); ++i) {
    out += std::to_string(i);
    out.push_back(',');
    out += std::to_string(a.bucket_id[i]);
    out.push_back(',');
    out += std::to_string(a.bucket_offset[i]);
    out.push_back(',');
    out += std::to_string(a.dest(i));
    out.push_back('\n');
  }
  return out;
}

/// Rebuilds an assignment from CSV. K and S are not stored in the CSV and
/// must be supplied; the batch count follows from the largest slot id.
inline BucketAssignment parse_assignment_csv(std::string_view text, std::int64_t num_buckets, std::int64_t capacity) {
  if (num_buckets < 1 || capacity < 1) throw ConfigError("assignment: K and S must be >= 1");
  BucketAssignment a;
  a.num_buckets = num_buckets;
  a.capacity = capacity;
  std::vector<std::int64_t> dest;
  bool header = true;
  detail::for_each_line(text, [&](std::string_view line, std::size_t line_no) {
    if (header) {
      header = false;
      if (line != kAssignmentHeader) throw ParseError("expected header '" + std::string(kAssignmentHeader) + "'", line_no);
      return;
    }
    auto f = detail::split_csv(line);
    if (f.size() != 4) throw ParseError("expected 4 columns", line_no);
    std::int64_t v[4];
    for (int c = 0; c < 4; ++c)
      if (!detail::parse_number(f[c], v[c])) throw ParseError("bad integer '" + std::string(f[c]) + "'", line_no);
    if (v[0] != static_cast<std::int64_t>(a.size())) throw ParseError("points must be listed in order", line_no);
    if (v[1] < 0) throw ParseError("negative bucket id", line_no);
    a.bucket_id.push_back(v[1]);
    a.bucket_offset.push_back(v[2]);
    dest.push_back(v[3]);
  });
  if (a.size() == 0) throw EmptyInputError("assignment CSV has no rows");
  std::int64_t hi = 0;
  for (auto b : a.bucket_id) hi = std::max(hi, b);
  a.num_batches = hi / a.slots_per_batch() + 1;
  a.counts.assign(static_cast<std::size_t>(a.num_slots()), 0);
  for (auto b : a.bucket_id) ++a.counts[b];
  a.bucket_base = compute_bucket_base(a.counts);
  a.validate();
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a.dest(i) != dest[i]) throw IntegrityError("assignment: dest_index column disagrees for point " + std::to_string(i));
  return a;
}

inline BucketAssignment load_assignment_csv(const std::string& path, std::int64_t num_buckets, std::int64_t capacity) {
  return parse_assignment_csv(detail::read_file(path), num_buckets, capacity);
}

inline void write_assignment_csv(const std::string& path, const BucketAssignment& a) {
  detail::write_text(path, format_assignment_csv(a));
}

}  // namespace psh3d
