#include <sstream>

#include <boost/property_tree/ptree.hpp>
#include <boost/property_tree/xml_parser.hpp>
#include <gtest/gtest.h>

#include "lensdyn/report/svg.hpp"

namespace lensdyn {
namespace {

boost::property_tree::ptree parse_xml(const std::string& text) {
  std::istringstream in(text);
  boost::property_tree::ptree tree;
  boost::property_tree::read_xml(in, tree);
  return tree;
}

TEST(Svg, EscapesMarkup) { EXPECT_EQ(svg::escape("a<b & \"c\">"), "a&lt;b &amp; &quot;c&quot;&gt;"); }

TEST(Svg, ChartsAreWellFormedXml) {
  const std::vector<svg::Series> series{{"Suc <logit>", {0.1, 0.4, 0.9}}, {"Hal & co", {0.2, 0.2, 0.5}}};
  for (const auto& doc : {svg::line_chart("mean curves", "checkpoint", "P", series),
                          svg::bar_chart("accuracy", {"logit", "tuned", "both"}, series),
                          svg::heatmap("ablation", {"subject-first", "last-token"}, {"1", "2", "3"},
                                       {{0.1, -0.2, 0.0}, {0.3, 0.0, -0.05}}, "layer")}) {
    boost::property_tree::ptree tree;
    ASSERT_NO_THROW(tree = parse_xml(doc)) << doc;
    EXPECT_EQ(tree.count("svg"), 1u);
    EXPECT_EQ(tree.get<std::string>("svg.<xmlattr>.xmlns"), "http://www.w3.org/2000/svg");
  }
}

TEST(Svg, EmptyInputsStillRender) {
  EXPECT_NO_THROW(parse_xml(svg::line_chart("empty", "x", "y", {})));
  EXPECT_NO_THROW(parse_xml(svg::bar_chart("empty", {}, {})));
  EXPECT_NO_THROW(parse_xml(svg::heatmap("empty", {}, {}, {}, "x")));
}

}  // namespace
}  // namespace lensdyn
