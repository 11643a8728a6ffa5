#include "onh/stats.hpp"

#include "onh/csv.hpp"
#include "onh/parallel.hpp"

#include <boost/math/distributions/fisher_f.hpp>
#include <boost/math/distributions/students_t.hpp>
#include <boost/math/quadrature/gauss_kronrod.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <numeric>
#include <ostream>
#include <random>
#include <set>

namespace onh::stats {

namespace {

[[noreturn]] void fail(const std::string& code, const std::string& msg) { throw Error("stats", code, msg); }

double mean_of(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / double(v.size()); }

double sd_of(const std::vector<double>& v) {
  if (v.size() < 2) return kNaN;
  const double m = mean_of(v);
  double ss = 0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / double(v.size() - 1));
}

double upper_tail(double z) { return 0.5 * std::erfc(z / std::numbers::sqrt2); }

}  // namespace

void GroupSamples::add(std::string label, std::vector<double> v) {
  labels.push_back(std::move(label));
  values.push_back(std::move(v));
}

GroupSamples GroupSamples::dropna() const {
  GroupSamples out;
  for (std::size_t g = 0; g < values.size(); ++g) {
    std::vector<double> v;
    for (double x : values[g])
      if (!std::isnan(x)) v.push_back(x);
    if (!v.empty()) out.add(labels[g], std::move(v));
  }
  return out;
}

std::size_t GroupSamples::total() const {
  std::size_t n = 0;
  for (const auto& v : values) n += v.size();
  return n;
}

AnovaResult one_way_anova(const GroupSamples& s) {
  const std::size_t k = s.values.size();
  if (k < 2) fail("TOO_FEW_GROUPS", "ANOVA needs at least two groups");
  for (std::size_t g = 0; g < k; ++g)
    if (s.values[g].size() < 2) fail("TOO_FEW_VALUES", "group " + s.labels[g] + " has fewer than two values");
  const std::size_t n = s.total();
  double grand = 0;
  for (const auto& v : s.values)
    for (double x : v) grand += x;
  grand /= double(n);
  AnovaResult r;
  for (const auto& v : s.values) {
    const double m = mean_of(v);
    r.ss_between += double(v.size()) * (m - grand) * (m - grand);
    for (double x : v) r.ss_within += (x - m) * (x - m);
  }
  r.df_between = int(k - 1);
  r.df_within = int(n - k);
  if (!(r.ss_within > 0)) fail("ZERO_WITHIN_VARIANCE", "all groups are constant");
  r.F = (r.ss_between / r.df_between) / r.ms_within();
  boost::math::fisher_f_distribution<double> dist(r.df_between, r.df_within);
  r.p = r.F > 0 ? boost::math::cdf(boost::math::complement(dist, r.F)) : 1.0;
  return r;
}

namespace {

using GK = boost::math::quadrature::gauss_kronrod<double, 31>;

/// Adaptive bisection on the Gauss-Kronrod error estimate with an absolute budget.
template <class F>
double integrate_abs(const F& f, double a, double b, double tol, int depth) {
  double err = 0;
  const double v = GK::integrate(f, a, b, 0, 0.0, &err);
  if (err <= tol || depth == 0) return v;
  const double m = 0.5 * (a + b);
  return integrate_abs(f, a, m, 0.5 * tol, depth - 1) + integrate_abs(f, m, b, 0.5 * tol, depth - 1);
}

}  // namespace

double studentized_range_sf(double q, int k, double df) {
  if (k < 2) fail("TOO_FEW_GROUPS", "studentized range needs k >= 2");
  if (!(df > 0)) fail("BAD_DF", "degrees of freedom must be positive");
  if (!(q > 0)) return 1.0;
  // P(range of k standard normals > w); the integrand is below 1e-17 outside |z| < 9
  auto range_sf = [k](double w) {
    auto f = [k, w](double z) {
      const double a = upper_tail(z);
      const double b = a - upper_tail(z + w);
      const double phi = std::exp(-0.5 * z * z) / std::sqrt(2 * std::numbers::pi);
      return k * phi * (std::pow(a, k - 1) - std::pow(b, k - 1));
    };
    return std::clamp(integrate_abs(f, -9.0, 9.0, 1e-13, 20), 0.0, 1.0);
  };
  if (std::isinf(df)) return range_sf(q);

  // s = sqrt(chi2_df / df)
  const double log_c = 0.5 * df * std::log(df) - std::lgamma(0.5 * df) - (0.5 * df - 1) * std::log(2.0);
  auto outer = [&](double s) {
    if (s <= 0) return 0.0;
    const double dens = std::exp(log_c + (df - 1) * std::log(s) - 0.5 * df * s * s);
    return dens * range_sf(q * s);
  };
  const double sigma = 1.0 / std::sqrt(2 * df);
  const double lo = std::max(0.0, 1.0 - 15 * sigma), hi = 1.0 + 15 * sigma + 2.0;
  double total = 0;
  const double cuts[] = {lo, std::max(lo, 1.0 - 3 * sigma), 1.0, 1.0 + 3 * sigma, hi};
  for (int i = 0; i + 1 < 5; ++i)
    if (cuts[i + 1] > cuts[i]) total += integrate_abs(outer, cuts[i], cuts[i + 1], 2.5e-11, 20);
  return std::clamp(total, 0.0, 1.0);
}

TukeyResult tukey_hsd(const GroupSamples& s, double alpha) {
  const AnovaResult a = one_way_anova(s);
  const int k = int(s.values.size());
  TukeyResult r;
  r.alpha = alpha;
  for (int i = 0; i < k; ++i)
    for (int j = i + 1; j < k; ++j) {
      TukeyPair p;
      p.a = std::size_t(i);
      p.b = std::size_t(j);
      const auto& vi = s.values[std::size_t(i)];
      const auto& vj = s.values[std::size_t(j)];
      p.mean_diff = mean_of(vj) - mean_of(vi);
      const double se = std::sqrt(a.ms_within() / 2 * (1.0 / double(vi.size()) + 1.0 / double(vj.size())));
      p.q = std::abs(p.mean_diff) / se;
      p.p = studentized_range_sf(p.q, k, a.df_within);
      p.significant = p.p < alpha;
      r.pairs.push_back(p);
    }
  return r;
}

TTest pooled_t_test(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() < 2 || b.size() < 2) fail("TOO_FEW_VALUES", "t test needs two values per group");
  const double ma = mean_of(a), mb = mean_of(b);
  double ss = 0;
  for (double x : a) ss += (x - ma) * (x - ma);
  for (double x : b) ss += (x - mb) * (x - mb);
  TTest r;
  r.df = double(a.size() + b.size() - 2);
  const double sp2 = ss / r.df;
  if (!(sp2 > 0)) fail("ZERO_WITHIN_VARIANCE", "both groups are constant");
  r.t = (mb - ma) / std::sqrt(sp2 * (1.0 / double(a.size()) + 1.0 / double(b.size())));
  boost::math::students_t_distribution<double> dist(r.df);
  r.p = 2 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t)));
  return r;
}

// ---------------------------------------------------------------- Fisher exact

namespace {

constexpr double kFisherRelTol = 1e-7;

struct Margins {
  std::vector<long> rows, cols;
  long n = 0;
  double log_const = 0;  // sum log row! + sum log col! - log n!
};

Margins margins_of(const Table& t) {
  if (t.empty() || t.front().empty()) fail("EMPTY_MARGIN", "empty table");
  Margins m;
  m.rows.assign(t.size(), 0);
  m.cols.assign(t.front().size(), 0);
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t[i].size() != m.cols.size()) fail("BAD_TABLE", "ragged table");
    for (std::size_t j = 0; j < t[i].size(); ++j) {
      if (t[i][j] < 0) fail("BAD_TABLE", "negative count");
      m.rows[i] += t[i][j];
      m.cols[j] += t[i][j];
    }
  }
  for (long r : m.rows)
    if (r == 0) fail("EMPTY_MARGIN", "a row sums to zero");
  for (long c : m.cols)
    if (c == 0) fail("EMPTY_MARGIN", "a column sums to zero");
  for (long r : m.rows) m.n += r;
  for (long r : m.rows) m.log_const += std::lgamma(double(r) + 1);
  for (long c : m.cols) m.log_const += std::lgamma(double(c) + 1);
  m.log_const -= std::lgamma(double(m.n) + 1);
  return m;
}

double log_prob(const Table& t, const Margins& m) {
  double s = m.log_const;
  for (const auto& row : t)
    for (long x : row) s -= std::lgamma(double(x) + 1);
  return s;
}

struct Enumerator {
  const Margins& m;
  double threshold;  // log probability cut
  std::size_t limit;
  std::size_t count = 0;
  double p = 0;
  bool overflow = false;
  std::vector<long> row_left;

  // Fills column j, row i onwards; `acc` is the sum of -log(cell!) so far.
  void column(std::size_t j, double acc) {
    if (overflow) return;
    const std::size_t R = row_left.size();
    if (j + 1 == m.cols.size()) {
      double s = acc;
      for (long r : row_left) s -= std::lgamma(double(r) + 1);
      ++count;
      if (count > limit) {
        overflow = true;
        return;
      }
      const double lp = m.log_const + s;
      if (lp <= threshold) p += std::exp(lp);
      return;
    }
    cell(j, 0, m.cols[j], acc, R);
  }

  void cell(std::size_t j, std::size_t i, long col_left, double acc, std::size_t R) {
    if (overflow) return;
    if (i + 1 == R) {
      if (col_left > row_left[i]) return;
      row_left[i] -= col_left;
      column(j + 1, acc - std::lgamma(double(col_left) + 1));
      row_left[i] += col_left;
      return;
    }
    long below = 0;  // capacity of the rows after i
    for (std::size_t r = i + 1; r < R; ++r) below += row_left[r];
    const long lo = std::max(0L, col_left - below), hi = std::min(row_left[i], col_left);
    for (long x = lo; x <= hi; ++x) {
      row_left[i] -= x;
      cell(j, i + 1, col_left - x, acc - std::lgamma(double(x) + 1), R);
      row_left[i] += x;
    }
  }
};

}  // namespace

FisherResult fisher_exact(const Table& table, std::uint64_t seed, std::size_t draws, long exact_limit) {
  const Margins m = margins_of(table);
  const double lp_obs = log_prob(table, m);
  const double threshold = lp_obs + kFisherRelTol;
  FisherResult r;
  const bool two_by_two = table.size() == 2 && table.front().size() == 2;

  if (two_by_two) {
    r.p = 0;
    // x = top-left cell, hypergeometric over its support
    const long r1 = m.rows[0], c1 = m.cols[0], n = m.n;
    const long lo = std::max(0L, r1 + c1 - n), hi = std::min(r1, c1);
    for (long x = lo; x <= hi; ++x) {
      const Table t{{x, r1 - x}, {c1 - x, n - r1 - c1 + x}};
      const double lp = log_prob(t, m);
      if (lp <= threshold) r.p += std::exp(lp);
      ++r.tables;
    }
    r.p = std::min(1.0, r.p);
    return r;
  }

  if (m.n <= exact_limit) {
    Enumerator e{m, threshold, 20'000'000, 0, 0.0, false, m.rows};
    e.column(0, 0.0);
    if (!e.overflow) {
      r.p = std::min(1.0, e.p);
      r.tables = e.count;
      return r;
    }
  }

  // Monte Carlo over tables with the observed margins: shuffle row memberships and
  // deal them into columns.
  if (draws == 0) fail("BAD_DRAWS", "Monte-Carlo test needs at least one draw");
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> members;
  for (std::size_t i = 0; i < m.rows.size(); ++i) members.insert(members.end(), std::size_t(m.rows[i]), i);
  Table t(m.rows.size(), std::vector<long>(m.cols.size()));
  std::size_t hits = 0;
  for (std::size_t d = 0; d < draws; ++d) {
    for (std::size_t i = members.size(); i > 1; --i) {
      std::uniform_int_distribution<std::size_t> pick(0, i - 1);
      std::swap(members[i - 1], members[pick(rng)]);
    }
    for (auto& row : t) std::fill(row.begin(), row.end(), 0);
    std::size_t at = 0;
    for (std::size_t j = 0; j < m.cols.size(); ++j)
      for (long c = 0; c < m.cols[j]; ++c) ++t[members[at++]][j];
    if (log_prob(t, m) <= threshold) ++hits;
  }
  r.monte_carlo = true;
  r.tables = draws;
  r.p = double(hits) / double(draws);
  r.std_error = std::sqrt(r.p * (1 - r.p) / double(draws));
  return r;
}

// ---------------------------------------------------------------- summaries

double quantile(std::vector<double> v, double prob) {
  if (v.empty()) return kNaN;
  std::sort(v.begin(), v.end());
  const double h = (double(v.size()) - 1) * prob;
  const auto lo = std::size_t(std::floor(h));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (h - double(lo)) * (v[hi] - v[lo]);
}

FiveNumber five_number(const std::vector<double>& v) {
  if (v.empty()) return {};
  return {quantile(v, 0), quantile(v, 0.25), quantile(v, 0.5), quantile(v, 0.75), quantile(v, 1)};
}

std::vector<EyeRow> rows_from(const std::vector<std::pair<OnhParameters, SeverityGroup>>& eyes) {
  std::vector<EyeRow> out;
  for (std::size_t i = 0; i < eyes.size(); ++i) {
    EyeRow r;
    r.id = std::to_string(i);
    r.group = eyes[i].second;
    for (const auto& [name, v] : eyes[i].first.fields()) r.values.push_back(v);
    out.push_back(std::move(r));
  }
  return out;
}

Report summarize(const std::vector<EyeRow>& eyes, unsigned threads) {
  const auto names = OnhParameters::field_names();
  std::set<SeverityGroup> present;
  for (const EyeRow& e : eyes) {
    if (e.values.size() != names.size())
      fail("BAD_ROW", "eye " + e.id + " has " + std::to_string(e.values.size()) + " values");
    present.insert(e.group);
  }
  Report rep;
  for (SeverityGroup g : present) rep.groups.emplace_back(severity_name(g));
  rep.parameters.resize(names.size());
  parallel_for(names.size(), threads, [&](std::size_t p) {
    ParameterSummary& ps = rep.parameters[p];
    ps.parameter = names[p];
    GroupSamples tested;
    for (SeverityGroup g : present) {
      std::vector<double> v;
      for (const EyeRow& e : eyes)
        if (e.group == g && !std::isnan(e.values[p])) v.push_back(e.values[p]);
      GroupSummary gs;
      gs.group = std::string(severity_name(g));
      gs.n = v.size();
      if (!v.empty()) gs.mean = mean_of(v);
      gs.sd = sd_of(v);
      gs.box = five_number(v);
      ps.groups.push_back(gs);
      if (v.size() >= 2) tested.add(gs.group, std::move(v));
    }
    ps.tested = tested.labels;
    try {
      ps.anova = one_way_anova(tested);
      ps.tukey = tukey_hsd(tested);
    } catch (const Error& e) {
      ps.anova.reset();
      ps.tukey.reset();
      ps.error = e.module() + "." + e.code();
    }
  });
  return rep;
}

nlohmann::json demographics(const std::vector<std::pair<SubjectMeta, SeverityGroup>>& subjects, std::uint64_t seed) {
  std::set<SeverityGroup> present;
  for (const auto& s : subjects) present.insert(s.second);
  nlohmann::json out;
  auto numeric = [&](const char* key, auto get) {
    GroupSamples gs;
    nlohmann::json j;
    for (SeverityGroup g : present) {
      std::vector<double> v;
      for (const auto& [meta, grp] : subjects)
        if (grp == g && !std::isnan(get(meta))) v.push_back(get(meta));
      const std::string name(severity_name(g));
      j["groups"][name] = {{"n", v.size()},
                           {"mean", v.empty() ? nlohmann::json(nullptr) : nlohmann::json(mean_of(v))},
                           {"sd", v.size() < 2 ? nlohmann::json(nullptr) : nlohmann::json(sd_of(v))}};
      if (v.size() >= 2) gs.add(name, std::move(v));
    }
    try {
      const AnovaResult a = one_way_anova(gs);
      j["anova"] = {{"F", a.F}, {"p", a.p}, {"df_between", a.df_between}, {"df_within", a.df_within}};
    } catch (const Error& e) {
      j["anova"] = {{"error", e.module() + "." + e.code()}};
    }
    out[key] = j;
  };
  numeric("age", [](const SubjectMeta& m) { return m.age; });
  numeric("md_db", [](const SubjectMeta& m) { return m.md_db; });

  std::set<std::string> sexes;
  for (const auto& s : subjects)
    if (!s.first.sex.empty()) sexes.insert(s.first.sex);
  Table t;
  nlohmann::json sj;
  for (SeverityGroup g : present) {
    std::vector<long> row;
    for (const std::string& x : sexes) {
      long c = 0;
      for (const auto& [meta, grp] : subjects)
        if (grp == g && meta.sex == x) ++c;
      row.push_back(c);
      sj["counts"][std::string(severity_name(g))][x] = c;
    }
    t.push_back(row);
  }
  try {
    const FisherResult f = fisher_exact(t, seed);
    sj["fisher"] = {{"p", f.p}, {"monte_carlo", f.monte_carlo}, {"std_error", f.std_error}};
  } catch (const Error& e) {
    sj["fisher"] = {{"error", e.module() + "." + e.code()}};
  }
  out["sex"] = sj;
  return out;
}

void write_summary_csv(std::ostream& out, const Report& rep) {
  out << "parameter,group,n,mean,sd,min,q1,median,q3,max\n";
  for (const ParameterSummary& p : rep.parameters)
    for (const GroupSummary& g : p.groups)
      out << p.parameter << ',' << g.group << ',' << g.n << ',' << csv::number(g.mean) << ',' << csv::number(g.sd)
          << ',' << csv::number(g.box.min) << ',' << csv::number(g.box.q1) << ',' << csv::number(g.box.median) << ','
          << csv::number(g.box.q3) << ',' << csv::number(g.box.max) << '\n';
}

void write_pairs_csv(std::ostream& out, const Report& rep) {
  out << "parameter,group_a,group_b,mean_diff,q,p,significance\n";
  for (const ParameterSummary& p : rep.parameters) {
    if (!p.tukey) continue;
    for (const TukeyPair& t : p.tukey->pairs)
      out << p.parameter << ',' << p.tested[t.a] << ',' << p.tested[t.b] << ',' << csv::number(t.mean_diff) << ','
          << csv::number(t.q) << ',' << csv::number(t.p) << ',' << (t.significant ? "*" : "") << '\n';
  }
}

nlohmann::json to_json(const Report& rep) {
  auto num = [](double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); };
  nlohmann::json j;
  j["groups"] = rep.groups;
  j["parameters"] = nlohmann::json::array();
  for (const ParameterSummary& p : rep.parameters) {
    nlohmann::json pj;
    pj["parameter"] = p.parameter;
    for (const GroupSummary& g : p.groups)
      pj["groups"].push_back({{"group", g.group},
                              {"n", g.n},
                              {"mean", num(g.mean)},
                              {"sd", num(g.sd)},
                              {"box", {num(g.box.min), num(g.box.q1), num(g.box.median), num(g.box.q3), num(g.box.max)}}});
    if (p.anova)
      pj["anova"] = {{"F", num(p.anova->F)},
                     {"p", num(p.anova->p)},
                     {"df_between", p.anova->df_between},
                     {"df_within", p.anova->df_within}};
    if (p.tukey)
      for (const TukeyPair& t : p.tukey->pairs)
        pj["tukey"].push_back({{"a", p.tested[t.a]},
                               {"b", p.tested[t.b]},
                               {"mean_diff", t.mean_diff},
                               {"q", t.q},
                               {"p", t.p},
                               {"significant", t.significant}});
    if (!p.error.empty()) pj["error"] = p.error;
    j["parameters"].push_back(pj);
  }
  if (!rep.demographics.is_null()) j["demographics"] = rep.demographics;
  return j;
}

}  // namespace onh::stats
