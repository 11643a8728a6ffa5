#pragma once

#include "onh/parameters.hpp"
#include "onh/volume_io.hpp"

#include <json.hpp>

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace onh::stats {

struct GroupSamples {
  std::vector<std::string> labels;
  std::vector<std::vector<double>> values;

  void add(std::string label, std::vector<double> v);
  /// NaN values removed; groups left empty are dropped.
  GroupSamples dropna() const;
  std::size_t total() const;
};

struct AnovaResult {
  double F = kNaN, p = kNaN;
  int df_between = 0, df_within = 0;
  double ss_between = 0, ss_within = 0;
  double ms_within() const { return ss_within / df_within; }
};

AnovaResult one_way_anova(const GroupSamples& samples);

struct TukeyPair {
  std::size_t a = 0, b = 0;  // group indices, a < b
  double mean_diff = 0;      // mean_b - mean_a
  double q = 0, p = 1;
  bool significant = false;
};

struct TukeyResult {
  double alpha = 0.05;
  std::vector<TukeyPair> pairs;  // (0,1), (0,2), ..., (k-2,k-1)
};

TukeyResult tukey_hsd(const GroupSamples& samples, double alpha = 0.05);

/// P(Q > q) for the studentized range of k normals with df degrees of freedom
/// (df = infinity allowed).
double studentized_range_sf(double q, int k, double df);

struct TTest {
  double t = 0, df = 0, p = 1;
};
/// Two-sided pooled-variance two-sample t test.
TTest pooled_t_test(const std::vector<double>& a, const std::vector<double>& b);

struct FisherResult {
  double p = kNaN;
  bool monte_carlo = false;
  double std_error = 0;  // Monte-Carlo only
  std::size_t tables = 0;
};

using Table = std::vector<std::vector<long>>;

/// Two-sided Fisher exact test: sum of table probabilities not exceeding the
/// observed one. Tables with total above `exact_limit` are sampled instead.
FisherResult fisher_exact(const Table& table, std::uint64_t seed = 0, std::size_t draws = 100000,
                          long exact_limit = 200);

/// Quantile by linear interpolation between order statistics (type 7).
double quantile(std::vector<double> sorted_or_not, double prob);

struct FiveNumber {
  double min = kNaN, q1 = kNaN, median = kNaN, q3 = kNaN, max = kNaN;
};
FiveNumber five_number(const std::vector<double>& v);

struct GroupSummary {
  std::string group;
  std::size_t n = 0;
  double mean = kNaN, sd = kNaN;
  FiveNumber box;
};

struct ParameterSummary {
  std::string parameter;
  std::vector<GroupSummary> groups;
  std::vector<std::string> tested;  // groups entering ANOVA and Tukey (n >= 2)
  std::optional<AnovaResult> anova;
  std::optional<TukeyResult> tukey;
  std::string error;  // module-qualified code when the tests could not run
};

struct EyeRow {
  std::string id;
  SeverityGroup group = SeverityGroup::Normal;
  std::vector<double> values;  // in OnhParameters::field_names() order
};

struct Report {
  std::vector<std::string> groups;  // severity order, only groups present
  std::vector<ParameterSummary> parameters;
  nlohmann::json demographics;  // empty when no subject records were given
};

Report summarize(const std::vector<EyeRow>& eyes, unsigned threads = 1);
std::vector<EyeRow> rows_from(const std::vector<std::pair<OnhParameters, SeverityGroup>>& eyes);

/// Age and MD by ANOVA, sex by Fisher exact test.
nlohmann::json demographics(const std::vector<std::pair<SubjectMeta, SeverityGroup>>& subjects, std::uint64_t seed = 0);

/// parameter,group,n,mean,sd,min,q1,median,q3,max
void write_summary_csv(std::ostream& out, const Report& report);
/// parameter,group_a,group_b,mean_diff,q,p,significance
void write_pairs_csv(std::ostream& out, const Report& report);
nlohmann::json to_json(const Report& report);

}  // namespace onh::stats
