#pragma once

#include <sempc/core.hpp>

#include <cctype>
#include <cmath>
#include <cstdlib>
#include <map>
#include <string>

namespace sempc {

/// Arithmetic over named variables: numbers, + - * / ^, parentheses, unary
/// minus and the functions sqrt, log, exp, abs, pow, min, max. Used to plug
/// a user-supplied radius formula into compare-radii.
class Expression {
 public:
  explicit Expression(std::string text) : text_(std::move(text)) {
    // Parse once with dummy variables to surface syntax errors early.
    pos_ = 0;
    vars_ = nullptr;
    checking_ = true;
    parse_sum();
    skip_space();
    if (pos_ != text_.size()) fail("unexpected '" + std::string(1, text_[pos_]) + "'");
    checking_ = false;
  }

  [[nodiscard]] double evaluate(const std::map<std::string, double>& vars) const {
    pos_ = 0;
    vars_ = &vars;
    const double v = parse_sum();
    return v;
  }

  [[nodiscard]] const std::string& text() const { return text_; }

 private:
  [[noreturn]] void fail(const std::string& msg) const {
    throw InvalidParameter("expression '" + text_ + "' at " + std::to_string(pos_) + ": " + msg);
  }

  void skip_space() const {
    while (pos_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[pos_]))) ++pos_;
  }

  bool eat(char c) const {
    skip_space();
    if (pos_ < text_.size() && text_[pos_] == c) {
      ++pos_;
      return true;
    }
    return false;
  }

  double parse_sum() const {
    double v = parse_product();
    for (;;) {
      if (eat('+')) v += parse_product();
      else if (eat('-')) v -= parse_product();
      else return v;
    }
  }

  double parse_product() const {
    double v = parse_unary();
    for (;;) {
      if (eat('*')) v *= parse_unary();
      else if (eat('/')) v /= parse_unary();
      else return v;
    }
  }

  // Unary minus binds looser than ^, so -2^2 = -4.
  double parse_unary() const {
    if (eat('-')) return -parse_unary();
    if (eat('+')) return parse_unary();
    return parse_power();
  }

  double parse_power() const {
    const double base = parse_atom();
    if (eat('^')) return std::pow(base, parse_unary());  // right associative
    return base;
  }

  double parse_atom() const {
    skip_space();
    if (pos_ >= text_.size()) fail("unexpected end");
    if (eat('(')) {
      const double v = parse_sum();
      if (!eat(')')) fail("expected ')'");
      return v;
    }
    const char c = text_[pos_];
    if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') {
      const char* begin = text_.c_str() + pos_;
      char* end = nullptr;
      const double v = std::strtod(begin, &end);
      if (end == begin) fail("bad number");
      pos_ += static_cast<std::size_t>(end - begin);
      return v;
    }
    if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
      const std::size_t start = pos_;
      while (pos_ < text_.size() && (std::isalnum(static_cast<unsigned char>(text_[pos_])) || text_[pos_] == '_')) ++pos_;
      const std::string name = text_.substr(start, pos_ - start);
      if (eat('(')) return call(name);
      if (checking_) return 1.0;
      const auto it = vars_->find(name);
      if (it == vars_->end()) fail("unknown variable '" + name + "'");
      return it->second;
    }
    fail("unexpected '" + std::string(1, c) + "'");
  }

  double call(const std::string& name) const {
    const double a = parse_sum();
    double b = 0.0;
    const bool binary = name == "pow" || name == "min" || name == "max";
    if (binary) {
      if (!eat(',')) fail("'" + name + "' takes two arguments");
      b = parse_sum();
    }
    if (!eat(')')) fail("expected ')'");
    if (name == "sqrt") return std::sqrt(a);
    if (name == "log") return std::log(a);
    if (name == "exp") return std::exp(a);
    if (name == "abs") return std::abs(a);
    if (name == "pow") return std::pow(a, b);
    if (name == "min") return std::min(a, b);
    if (name == "max") return std::max(a, b);
    fail("unknown function '" + name + "'");
  }

  std::string text_;
  mutable std::size_t pos_ = 0;
  mutable const std::map<std::string, double>* vars_ = nullptr;
  bool checking_ = false;
};

}  // namespace sempc
